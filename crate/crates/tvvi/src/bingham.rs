//! Finite-difference Bingham pipe flow on the unit square: 5-point Laplacian,
//! centered gradient (with a boundary repair making it injective), the
//! tracking objective and the parameter sweep.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control_tr::{tr_optimize, LowerSolver, TRConfig, TRTrace};
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::linalg::{smallest_eigenvalue_spd, CsrMatrix};
use crate::stationarity::TrackingCost;
use crate::vi_core::VIProblem;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Subdivisions per side; mesh size `1/n_sub`.
    pub n_sub: usize,
    /// Keep boundary nodes as unknowns (decoupled identity rows in `A`).
    #[serde(default)]
    pub include_boundary: bool,
}

impl GridSpec {
    pub fn interior(n_sub: usize) -> Self {
        GridSpec { n_sub, include_boundary: false }
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n_sub as f64
    }

    /// Nodes per side in the state vector.
    pub fn side(&self) -> usize {
        if self.include_boundary {
            self.n_sub + 1
        } else {
            self.n_sub - 1
        }
    }

    pub fn node_count(&self) -> usize {
        self.side() * self.side()
    }

    /// Index of node `(i, j)`, `i` along x.
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.side() + i
    }

    /// Coordinates of node `(i, j)`.
    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        let off = if self.include_boundary { 0.0 } else { 1.0 };
        ((i as f64 + off) * self.h(), (j as f64 + off) * self.h())
    }

    fn is_boundary(&self, i: usize, j: usize) -> bool {
        let l = self.side() - 1;
        self.include_boundary && (i == 0 || j == 0 || i == l || j == l)
    }

    /// Unknown nodes next to the Dirichlet boundary (the first interior layer).
    pub fn boundary_adjacent(&self) -> Vec<usize> {
        let s = self.side();
        let (lo, hi) = if self.include_boundary { (1, s - 2) } else { (0, s - 1) };
        let mut out = Vec::new();
        for j in 0..s {
            for i in 0..s {
                let inside = i >= lo && i <= hi && j >= lo && j <= hi;
                if inside && (i == lo || i == hi || j == lo || j == hi) {
                    out.push(self.index(i, j));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sub < 2 {
            return Err(Error::BadInput(format!("grid needs at least 2 subdivisions, got {}", self.n_sub)));
        }
        Ok(())
    }
}

/// `h^-2 [-1 -1 4 -1 -1]` on unknown interior nodes; boundary nodes (when
/// kept) get decoupled rows `h^-2`.
pub fn build_laplacian_5pt(grid: &GridSpec) -> CsrMatrix {
    let s = grid.side();
    let h2 = grid.h() * grid.h();
    let mut t = Vec::new();
    for j in 0..s {
        for i in 0..s {
            let r = grid.index(i, j);
            if grid.is_boundary(i, j) {
                t.push((r, r, 1.0 / h2));
                continue;
            }
            t.push((r, r, 4.0 / h2));
            let nb = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
            for (a, b) in nb {
                if a < s && b < s && !grid.is_boundary(a, b) {
                    t.push((r, grid.index(a, b), -1.0 / h2));
                }
            }
        }
    }
    CsrMatrix::from_triplets(s * s, s * s, &t)
}

/// Which one-sided differences replace centered ones next to the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientVariant {
    Centered,
    /// Forward difference on the first layer.
    ForwardFirstLayer,
    /// Forward difference on the first layer, backward on the last.
    OneSidedBothLayers,
}

fn difference_1d(side: usize, h: f64, variant: GradientVariant) -> Vec<Vec<(usize, f64)>> {
    let mut rows = Vec::with_capacity(side);
    for i in 0..side {
        let mut r = Vec::new();
        let first = i == 0 && variant != GradientVariant::Centered;
        let last = i + 1 == side && variant == GradientVariant::OneSidedBothLayers;
        if first {
            r.push((i, 1.0 / h));
        } else if last {
            r.push((i, -1.0 / h));
        } else {
            if i > 0 {
                r.push((i - 1, -0.5 / h));
            }
            if i + 1 < side {
                r.push((i + 1, 0.5 / h));
            }
        }
        rows.push(r);
    }
    rows
}

fn gradient_blocks(grid: &GridSpec, variant: GradientVariant) -> Vec<CsrMatrix> {
    let s = grid.side();
    let d1 = difference_1d(s, grid.h(), variant);
    let mut tx = Vec::new();
    let mut ty = Vec::new();
    for j in 0..s {
        for i in 0..s {
            let r = grid.index(i, j);
            for &(c, v) in &d1[i] {
                tx.push((r, grid.index(c, j), v));
            }
            for &(c, v) in &d1[j] {
                ty.push((r, grid.index(i, c), v));
            }
        }
    }
    let n = s * s;
    vec![CsrMatrix::from_triplets(n, n, &tx), CsrMatrix::from_triplets(n, n, &ty)]
}

/// Whether `K^T K` is positive definite, decided by its smallest eigenvalue
/// relative to its largest diagonal entry.
pub fn gradient_is_injective(k: &[CsrMatrix]) -> bool {
    let n = k[0].ncols;
    let mut t = Vec::new();
    for b in k {
        for i in 0..b.nrows {
            let row: Vec<(usize, f64)> = b.row(i).collect();
            for &(c1, v1) in &row {
                for &(c2, v2) in &row {
                    t.push((c1, c2, v1 * v2));
                }
            }
        }
    }
    let ktk = CsrMatrix::from_triplets(n, n, &t);
    let scale = ktk.max_abs_diag();
    if scale == 0.0 {
        return false;
    }
    let shift = 1e-13 * scale;
    let mut ts = ktk.triplets();
    ts.extend((0..n).map(|i| (i, i, shift)));
    match smallest_eigenvalue_spd(&CsrMatrix::from_triplets(n, n, &ts), 500) {
        Ok(lam) => lam - shift > 1e-9 * scale,
        Err(_) => false,
    }
}

/// Centered differences with zero ghost values, repaired with one-sided
/// differences next to the boundary until `K` is injective.
pub fn build_gradient_centered(grid: &GridSpec) -> Result<(Vec<CsrMatrix>, GradientVariant)> {
    for v in [GradientVariant::Centered, GradientVariant::ForwardFirstLayer, GradientVariant::OneSidedBothLayers] {
        let k = gradient_blocks(grid, v);
        if gradient_is_injective(&k) {
            return Ok((k, v));
        }
    }
    Err(Error::InjectivityRepairFailed)
}

/// `A`, `K` and the variant used, for the given grid and constant control.
pub fn bingham_problem(grid: &GridSpec, u: f64) -> Result<(VIProblem, GradientVariant)> {
    grid.validate()?;
    let a = build_laplacian_5pt(grid);
    let (k, variant) = build_gradient_centered(grid)?;
    let n = grid.node_count();
    let prob = VIProblem::from_shared(Arc::new(a), Arc::new(k), DVector::from_element(n, u))?;
    Ok((prob, variant))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinghamConfig {
    pub grid: GridSpec,
    pub alpha: f64,
    pub target: f64,
    pub u0: f64,
    pub tr: TRConfig,
    pub lower_solver: LowerSolver,
}

impl BinghamConfig {
    pub fn new(n_sub: usize, alpha: f64) -> Self {
        BinghamConfig {
            grid: GridSpec::interior(n_sub),
            alpha,
            target: 1.0,
            u0: 10.0,
            tr: TRConfig::default(),
            lower_solver: LowerSolver::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub alpha: f64,
    pub iterations: usize,
    pub initial_f: f64,
    pub final_f: f64,
    pub final_grad_norm: f64,
    pub final_psi: Option<f64>,
    pub stop_reason: String,
    pub gradient_variant: GradientVariant,
    pub boundary_adjacent_max_u: f64,
    pub wall_seconds: f64,
}

/// Final fields of one run.
#[derive(Clone, Debug)]
pub struct ExperimentFields {
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub p: DVector<f64>,
}

pub fn run_experiment(cfg: &BinghamConfig) -> Result<(TRTrace, ExperimentSummary, ExperimentFields)> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::BadInput("alpha must be positive".into()));
    }
    let start = Instant::now();
    let (prob, variant) = bingham_problem(&cfg.grid, cfg.u0)?;
    let n = prob.n;
    let cost = TrackingCost::new(DVector::from_element(n, cfg.target), cfg.alpha, DVector::zeros(n));
    let u0 = DVector::from_element(n, cfg.u0);
    let out = tr_optimize(&prob, &cost, &cfg.tr, &cfg.lower_solver, &u0)?;
    let adjacent = cfg.grid.boundary_adjacent();
    let bmax = adjacent.iter().map(|&i| out.u[i]).fold(f64::NEG_INFINITY, f64::max);
    let last = out.trace.records.last();
    let summary = ExperimentSummary {
        alpha: cfg.alpha,
        iterations: out.iterations,
        initial_f: out.trace.records.first().map_or(f64::NAN, |r| r.f),
        final_f: out.f,
        final_grad_norm: out.grad_norm,
        final_psi: last.and_then(|r| r.psi),
        stop_reason: format!("{:?}", out.stop),
        gradient_variant: variant,
        boundary_adjacent_max_u: bmax,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out.trace, summary, ExperimentFields { u: out.u, y: out.y, p: out.p }))
}

/// Subdivisions per side of the experiment grid (60 x 60 unknowns).
pub const DEFAULT_SUBDIVISIONS: usize = 61;

/// Summary table with one row per weight (wall time omitted so the file is reproducible).
pub fn table1_csv(rows: &[ExperimentSummary]) -> String {
    let mut s = String::from("alpha,iterations,initial_f,final_f,final_grad_norm,final_psi,stop_reason,gradient_variant,boundary_adjacent_max_u\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:?},{}\n",
            fmt_f64(r.alpha),
            r.iterations,
            fmt_f64(r.initial_f),
            fmt_f64(r.final_f),
            fmt_f64(r.final_grad_norm),
            r.final_psi.map(fmt_f64).unwrap_or_default(),
            r.stop_reason,
            r.gradient_variant,
            fmt_f64(r.boundary_adjacent_max_u)
        ));
    }
    s
}

/// Default Tikhonov weights of the sweep.
pub const TABLE1_ALPHAS: [f64; 5] = [5e-3, 1e-3, 5e-4, 1e-4, 5e-5];
/// Expected iteration counts for those weights.
pub const TABLE1_REFERENCE_ITERATIONS: [usize; 5] = [24, 29, 33, 55, 58];

/// One run per weight, sequentially, with everything else from `base`.
pub fn sweep_table1(alphas: &[f64], base: &BinghamConfig) -> Result<Vec<(TRTrace, ExperimentSummary, ExperimentFields)>> {
    alphas
        .iter()
        .map(|&alpha| run_experiment(&BinghamConfig { alpha, ..base.clone() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_grid() {
        let g = GridSpec::interior(2);
        let a = build_laplacian_5pt(&g);
        assert_eq!(a.to_dense()[(0, 0)], 16.0);
        let (k, v) = build_gradient_centered(&g).unwrap();
        assert_eq!(v, GradientVariant::ForwardFirstLayer);
        assert_eq!((k[0].get(0, 0), k[1].get(0, 0)), (2.0, 2.0));
    }

    #[test]
    fn centered_singular_for_even_injective_for_odd() {
        assert!(!gradient_is_injective(&gradient_blocks(&GridSpec::interior(8), GradientVariant::Centered)));
        assert!(gradient_is_injective(&gradient_blocks(&GridSpec::interior(9), GradientVariant::Centered)));
        assert_eq!(build_gradient_centered(&GridSpec::interior(9)).unwrap().1, GradientVariant::Centered);
    }

    #[test]
    fn interior_rows_sum_to_zero() {
        let g = GridSpec::interior(6);
        let a = build_laplacian_5pt(&g);
        let r = g.index(2, 2);
        assert_eq!(a.row(r).map(|(_, v)| v).sum::<f64>(), 0.0);
    }

    #[test]
    fn boundary_convention_builds() {
        let g = GridSpec { n_sub: 6, include_boundary: true };
        let (p, _) = bingham_problem(&g, 1.0).unwrap();
        assert_eq!(p.n, 49);
        p.check_invariants(8, 1).unwrap();
    }
}
