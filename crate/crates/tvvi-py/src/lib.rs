//! Python bindings. Vectors cross the boundary as lists of floats, `q` as a
//! list of rows.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tvvi::bingham::{bingham_problem, run_experiment, BinghamConfig, GridSpec};
use tvvi::control_tr::{psi_measure as psi_core, tr_optimize, LowerSolver, TRConfig};
use tvvi::io::{load_problem, rows_of, save_problem, vec_of};
use tvvi::sensitivity::{
    bouligand_element_apply, directional_derivative as dd_core, frechet_check as fc_core, BiactivePartition,
    FrechetStatus, DEFAULT_PARTITION_CAP,
};
use tvvi::solvers::{solve_vi_pdhg, solve_vi_ssn, PDHGConfig, SSNConfig};
use tvvi::stationarity::TrackingCost;
use tvvi::{VIProblem, VISolution};

fn err(e: tvvi::Error) -> PyErr {
    match e {
        tvvi::Error::BadInput(_) | tvvi::Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

fn vector(v: Vec<f64>, n: usize, what: &str) -> PyResult<DVector<f64>> {
    if v.len() == 1 && n > 1 {
        return Ok(DVector::from_element(n, v[0]));
    }
    if v.len() != n {
        return Err(PyValueError::new_err(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(DVector::from_vec(v))
}

#[pyclass(name = "Problem", module = "tvvi", frozen)]
struct PyProblem {
    inner: VIProblem,
}

#[pymethods]
impl PyProblem {
    /// `a y + k_rows q = u` with `k_rows` identical scalar blocks.
    #[staticmethod]
    fn scalar_family(a: f64, k_rows: usize, u: f64) -> Self {
        PyProblem { inner: VIProblem::scalar_family(a, k_rows, u) }
    }

    /// Pipe-flow discretization on `n_sub` subdivisions per side, constant control `u`.
    #[staticmethod]
    #[pyo3(signature = (n_sub, u, include_boundary = false))]
    fn bingham(n_sub: usize, u: f64, include_boundary: bool) -> PyResult<Self> {
        let grid = GridSpec { include_boundary, ..GridSpec::interior(n_sub) };
        Ok(PyProblem { inner: bingham_problem(&grid, u).map_err(err)?.0 })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyProblem { inner: load_problem(Path::new(path)).map_err(err)? })
    }

    /// Writes the matrices and `problem.json` into `dir`; returns the descriptor path.
    fn save(&self, dir: &str) -> PyResult<String> {
        Ok(save_problem(Path::new(dir), &self.inner).map_err(err)?.display().to_string())
    }

    fn with_control(&self, u: Vec<f64>) -> PyResult<Self> {
        Ok(PyProblem { inner: self.inner.with_control(vector(u, self.inner.n, "u")?) })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn u(&self) -> Vec<f64> {
        vec_of(&self.inner.u)
    }

    fn __repr__(&self) -> String {
        format!("Problem(n={}, m={}, d={})", self.inner.n, self.inner.m, self.inner.d)
    }
}

#[pyclass(name = "Solution", module = "tvvi", frozen)]
struct PySolution {
    inner: VISolution,
    labels: String,
}

impl PySolution {
    fn new(prob: &VIProblem, inner: VISolution) -> Self {
        let labels = inner.sets(prob).labels(prob.m).into_iter().map(|l| ['I', 'S', 'B'][l as usize]).collect();
        PySolution { inner, labels }
    }
}

#[pymethods]
impl PySolution {
    #[getter]
    fn y(&self) -> Vec<f64> {
        vec_of(&self.inner.y)
    }

    #[getter]
    fn q(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.q)
    }

    /// One letter per block: `I` inactive, `S` strongly active, `B` biactive.
    #[getter]
    fn sets(&self) -> String {
        self.labels.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    /// `(state_eq, comp, feas)`
    #[getter]
    fn residuals(&self) -> (f64, f64, f64) {
        let r = self.inner.residuals;
        (r.state_eq, r.comp, r.feas)
    }

    fn __repr__(&self) -> String {
        format!("Solution(sets={:?}, residual={:.2e})", self.labels, self.inner.residuals.max())
    }
}

/// Solve the VI with `"pdhg"` (default) or `"ssn"`.
#[pyfunction]
#[pyo3(signature = (problem, solver = "pdhg", tol = None, max_iter = None, gamma = None))]
fn solve(problem: &PyProblem, solver: &str, tol: Option<f64>, max_iter: Option<usize>, gamma: Option<f64>) -> PyResult<PySolution> {
    let p = &problem.inner;
    let sol = match solver {
        "pdhg" => {
            let mut c = PDHGConfig::default();
            c.tol = tol.unwrap_or(c.tol);
            c.max_iter = max_iter.unwrap_or(c.max_iter);
            solve_vi_pdhg(p, &c, None)
        }
        "ssn" => {
            let mut c = SSNConfig::default();
            c.tol_newton = tol.unwrap_or(c.tol_newton);
            c.max_iter = max_iter.unwrap_or(c.max_iter);
            c.gamma = gamma.unwrap_or(c.gamma);
            solve_vi_ssn(p, &c, None)
        }
        other => return Err(PyValueError::new_err(format!("unknown solver {other:?}"))),
    }
    .map_err(err)?;
    Ok(PySolution::new(p, sol))
}

/// Directional derivative `S'(u; h)` at a computed solution.
#[pyfunction]
fn directional_derivative(problem: &PyProblem, solution: &PySolution, h: Vec<f64>) -> PyResult<Vec<f64>> {
    let p = &problem.inner;
    let h = vector(h, p.n, "h")?;
    let sets = solution.inner.sets(p);
    Ok(vec_of(&dd_core(p, &solution.inner, &sets, &h, DEFAULT_PARTITION_CAP).map_err(err)?.eta))
}

/// Bouligand element applied to `h`; bit `i` of `b1_mask` puts the `i`-th biactive block in B1.
#[pyfunction]
#[pyo3(signature = (problem, solution, h, b1_mask = 0))]
fn bouligand_element(problem: &PyProblem, solution: &PySolution, h: Vec<f64>, b1_mask: u64) -> PyResult<Vec<f64>> {
    let p = &problem.inner;
    let h = vector(h, p.n, "h")?;
    let sets = solution.inner.sets(p);
    let part = BiactivePartition::from_mask(&sets, b1_mask);
    Ok(vec_of(&bouligand_element_apply(p, &solution.inner, &sets, &part, &h).map_err(err)?.eta))
}

/// `(differentiable, r_bar)`
#[pyfunction]
fn frechet_check(problem: &PyProblem, solution: &PySolution) -> PyResult<(bool, Option<f64>)> {
    let p = &problem.inner;
    let sets = solution.inner.sets(p);
    Ok(match fc_core(p, &solution.inner, &sets).map_err(err)? {
        FrechetStatus::Differentiable { r_bar, .. } => (true, r_bar),
        FrechetStatus::NotDifferentiable { r_bar } => (false, Some(r_bar)),
    })
}

/// `(psi, w)` for a list of gradients.
#[pyfunction]
fn psi_measure(gradients: Vec<Vec<f64>>) -> PyResult<(f64, Vec<f64>)> {
    let g: Vec<DVector<f64>> = gradients.into_iter().map(DVector::from_vec).collect();
    let (psi, w) = psi_core(&g).map_err(err)?;
    Ok((psi, vec_of(&w)))
}

/// Tracking-type control problem solved by the trust-region method.
/// `config` and `lower_solver` are JSON strings (missing fields take defaults).
#[pyfunction]
#[pyo3(signature = (problem, y_target, alpha, u0, config = None, lower_solver = None))]
fn optimize<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    y_target: Vec<f64>,
    alpha: f64,
    u0: Vec<f64>,
    config: Option<&str>,
    lower_solver: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let p = &problem.inner;
    let cfg: TRConfig = self::config(config)?;
    let lower: LowerSolver = self::config(lower_solver)?;
    let cost = TrackingCost::new(vector(y_target, p.n, "y_target")?, alpha, DVector::zeros(p.n));
    let u0 = vector(u0, p.n, "u0")?;
    let out = py.detach(|| tr_optimize(p, &cost, &cfg, &lower, &u0)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("u", vec_of(&out.u))?;
    d.set_item("y", vec_of(&out.y))?;
    d.set_item("p", vec_of(&out.p))?;
    d.set_item("f", out.f)?;
    d.set_item("grad_norm", out.grad_norm)?;
    d.set_item("iterations", out.iterations)?;
    d.set_item("stop", format!("{:?}", out.stop))?;
    d.set_item("f_history", out.trace.records.iter().map(|r| r.f).collect::<Vec<_>>())?;
    d.set_item("trace_csv", out.trace.to_csv())?;
    Ok(d)
}

/// One run of the pipe-flow experiment; `config` is a JSON string overriding the TR settings.
#[pyfunction]
#[pyo3(signature = (n_sub, alpha, config = None))]
fn bingham_experiment<'py>(py: Python<'py>, n_sub: usize, alpha: f64, config: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = BinghamConfig::new(n_sub, alpha);
    cfg.tr = self::config(config)?;
    let (trace, s, fields) = py.detach(|| run_experiment(&cfg)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("iterations", s.iterations)?;
    d.set_item("initial_f", s.initial_f)?;
    d.set_item("final_f", s.final_f)?;
    d.set_item("final_grad_norm", s.final_grad_norm)?;
    d.set_item("stop_reason", s.stop_reason)?;
    d.set_item("side", cfg.grid.side())?;
    d.set_item("u", vec_of(&fields.u))?;
    d.set_item("y", vec_of(&fields.y))?;
    d.set_item("f_history", trace.records.iter().map(|r| r.f).collect::<Vec<_>>())?;
    Ok(d)
}

/// Dense `q` given as rows, for building solutions by hand.
#[pyfunction]
fn make_solution(problem: &PyProblem, y: Vec<f64>, q: Vec<Vec<f64>>) -> PyResult<PySolution> {
    let p = &problem.inner;
    let y = vector(y, p.n, "y")?;
    if q.len() != p.m || q.iter().any(|r| r.len() != p.d) {
        return Err(PyValueError::new_err(format!("q must be {} rows of length {}", p.m, p.d)));
    }
    let q = DMatrix::from_fn(p.m, p.d, |i, j| q[i][j]);
    Ok(PySolution::new(p, VISolution::new(p, y, q)))
}

#[pymodule]
#[pyo3(name = "tvvi")]
fn tvvi_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PySolution>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(make_solution, m)?)?;
    m.add_function(wrap_pyfunction!(directional_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(bouligand_element, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_check, m)?)?;
    m.add_function(wrap_pyfunction!(psi_measure, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    m.add_function(wrap_pyfunction!(bingham_experiment, m)?)?;
    Ok(())
}
