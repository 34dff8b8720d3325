//! Problem and solution data, set classification, complementarity residuals,
//! the energy functional and cone membership tests.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

/// Default threshold for |(Ky)_j| and for 1 - |q_j| in set classification.
pub const DEFAULT_EPS_ACTIVE: f64 = 1e-8;
/// Default acceptance tolerance for complementarity residuals.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-10;

/// `A`, `K = (K^(1), ..., K^(d))` and the control `u`.
///
/// Operators sit behind `Arc` so that changing the control is cheap.
#[derive(Clone, Debug)]
pub struct VIProblem {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub a: Arc<CsrMatrix>,
    /// `d` blocks, each `m x n`.
    pub k: Arc<Vec<CsrMatrix>>,
    pub u: DVector<f64>,
}

impl VIProblem {
    pub fn new(a: CsrMatrix, k: Vec<CsrMatrix>, u: DVector<f64>) -> Result<Self> {
        Self::from_shared(Arc::new(a), Arc::new(k), u)
    }

    pub fn from_shared(a: Arc<CsrMatrix>, k: Arc<Vec<CsrMatrix>>, u: DVector<f64>) -> Result<Self> {
        let n = a.nrows;
        if a.ncols != n {
            return Err(Error::Dimension(format!("A must be square, got {}x{}", a.nrows, a.ncols)));
        }
        if k.is_empty() {
            return Err(Error::Dimension("K needs at least one block".into()));
        }
        let m = k[0].nrows;
        for (i, b) in k.iter().enumerate() {
            if b.nrows != m || b.ncols != n {
                return Err(Error::Dimension(format!(
                    "K block {i} is {}x{}, expected {m}x{n}",
                    b.nrows, b.ncols
                )));
            }
        }
        if u.len() != n {
            return Err(Error::Dimension(format!("u has length {}, expected {n}", u.len())));
        }
        Ok(VIProblem { n, m, d: k.len(), a, k, u })
    }

    /// Same operators, different control.
    pub fn with_control(&self, u: DVector<f64>) -> VIProblem {
        assert_eq!(u.len(), self.n);
        VIProblem { u, ..self.clone() }
    }

    /// Scalar family `A = [a]`, `K` a column of `k_rows` ones.
    pub fn scalar_family(a: f64, k_rows: usize, u: f64) -> VIProblem {
        let am = CsrMatrix::from_dense(&[vec![a]]);
        let km = CsrMatrix::from_triplets(k_rows, 1, &(0..k_rows).map(|j| (j, 0, 1.0)).collect::<Vec<_>>());
        VIProblem::new(am, vec![km], DVector::from_element(1, u)).unwrap()
    }

    /// `Kv` as an `m x d` array.
    pub fn apply_k(&self, v: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m, self.d);
        for (i, b) in self.k.iter().enumerate() {
            out.set_column(i, &b.mul_vec(v));
        }
        out
    }

    /// `K^T q` for an `m x d` array `q`.
    pub fn apply_kt(&self, q: &DMatrix<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (i, b) in self.k.iter().enumerate() {
            out += b.tr_mul_vec(&q.column(i).into_owned());
        }
        out
    }

    /// Row `j` of `Kv`.
    pub fn k_block(&self, j: usize, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.d, |i, _| self.k[i].row_dot(j, v.as_slice()))
    }

    /// Triplets of `sum_j K_j^T M_j K_j` for the given `d x d` blocks `M_j`.
    pub fn block_gram_triplets(&self, blocks: &[(usize, DMatrix<f64>)]) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::new();
        for (j, mj) in blocks {
            let rows: Vec<Vec<(usize, f64)>> = self.k.iter().map(|b| b.row(*j).collect()).collect();
            for a in 0..self.d {
                for b in 0..self.d {
                    let w = mj[(a, b)];
                    if w == 0.0 {
                        continue;
                    }
                    for &(ca, va) in &rows[a] {
                        for &(cb, vb) in &rows[b] {
                            t.push((ca, cb, w * va * vb));
                        }
                    }
                }
            }
        }
        t
    }

    /// Sparse rows `K^(1)_j, ..., K^(d)_j`.
    pub fn block_rows(&self, j: usize) -> Vec<Vec<(usize, f64)>> {
        self.k.iter().map(|b| b.row(j).collect()).collect()
    }

    /// Checks symmetry and definiteness of `A` and injectivity of `K` on random probes.
    pub fn check_invariants(&self, probes: usize, seed: u64) -> Result<()> {
        let asym = self.a.asymmetry();
        if asym > 1e-12 * self.a.max_abs_diag().max(1.0) {
            return Err(Error::BadInput(format!("A is not symmetric (max defect {asym:e})")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..probes {
            let x = DVector::from_fn(self.n, |_, _| rng.gen_range(-1.0..1.0));
            if x.norm() == 0.0 {
                continue;
            }
            if x.dot(&self.a.mul_vec(&x)) <= 0.0 {
                return Err(Error::BadInput("A is not positive definite".into()));
            }
            if self.apply_k(&x).norm_squared() <= 1e-14 * x.norm_squared() {
                return Err(Error::BadInput("K is not injective".into()));
            }
        }
        Ok(())
    }
}

/// Norms of the three parts of the complementarity system.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplementarityResiduals {
    /// |Ay + K^T q - u|
    pub state_eq: f64,
    /// max_j |<q_j,(Ky)_j> - |(Ky)_j||
    pub comp: f64,
    /// max_j max(|q_j| - 1, 0)
    pub feas: f64,
}

impl ComplementarityResiduals {
    pub fn max(&self) -> f64 {
        self.state_eq.max(self.comp).max(self.feas)
    }
}

/// State, slack and the residuals they attain.
#[derive(Clone, Debug)]
pub struct VISolution {
    pub y: DVector<f64>,
    /// `m x d`, row `j` is `q_j`.
    pub q: DMatrix<f64>,
    pub residuals: ComplementarityResiduals,
    /// Threshold on |(Ky)_j| matching how the solution was computed.
    pub eps_active: f64,
    pub iterations: usize,
}

impl VISolution {
    pub fn new(prob: &VIProblem, y: DVector<f64>, q: DMatrix<f64>) -> VISolution {
        let residuals = residuals(prob, &y, &q);
        VISolution { y, q, residuals, eps_active: DEFAULT_EPS_ACTIVE, iterations: 0 }
    }

    pub fn q_row(&self, j: usize) -> DVector<f64> {
        self.q.row(j).transpose()
    }

    /// Same state with a different slack.
    pub fn with_slack(&self, prob: &VIProblem, q: DMatrix<f64>) -> VISolution {
        let residuals = residuals(prob, &self.y, &q);
        VISolution { q, residuals, ..self.clone() }
    }

    /// Classification with this solution's own threshold.
    pub fn sets(&self, prob: &VIProblem) -> IndexSets {
        classify_sets(prob, self, self.eps_active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexSets {
    pub inactive: Vec<usize>,
    pub active: Vec<usize>,
    pub strongly_active: Vec<usize>,
    pub biactive: Vec<usize>,
    pub eps_active: f64,
    pub eps_q: f64,
}

impl IndexSets {
    /// Membership table: 0 inactive, 1 strongly active, 2 biactive.
    pub fn labels(&self, m: usize) -> Vec<u8> {
        let mut l = vec![0u8; m];
        for &j in &self.strongly_active {
            l[j] = 1;
        }
        for &j in &self.biactive {
            l[j] = 2;
        }
        l
    }
}

pub fn energy(prob: &VIProblem, y: &DVector<f64>) -> Result<f64> {
    if y.len() != prob.n {
        return Err(Error::Dimension(format!("y has length {}, expected {}", y.len(), prob.n)));
    }
    let ky = prob.apply_k(y);
    let tv: f64 = (0..prob.m).map(|j| ky.row(j).norm()).sum();
    Ok(0.5 * y.dot(&prob.a.mul_vec(y)) - prob.u.dot(y) + tv)
}

pub fn residuals(prob: &VIProblem, y: &DVector<f64>, q: &DMatrix<f64>) -> ComplementarityResiduals {
    let state = prob.a.mul_vec(y) + prob.apply_kt(q) - &prob.u;
    let ky = prob.apply_k(y);
    let mut comp = 0.0f64;
    let mut feas = 0.0f64;
    for j in 0..prob.m {
        let w = ky.row(j);
        let qj = q.row(j);
        comp = comp.max((qj.dot(&w) - w.norm()).abs());
        feas = feas.max(qj.norm() - 1.0);
    }
    ComplementarityResiduals { state_eq: state.norm(), comp, feas: feas.max(0.0) }
}

/// `I`: |(Ky)_j| > eps_active. On `A`, blocks with |q_j| < 1 - eps_q are
/// strongly active, the rest biactive.
pub fn classify_sets(prob: &VIProblem, sol: &VISolution, eps_active: f64) -> IndexSets {
    classify_sets_with(prob, sol, eps_active, DEFAULT_EPS_ACTIVE)
}

pub fn classify_sets_with(prob: &VIProblem, sol: &VISolution, eps_active: f64, eps_q: f64) -> IndexSets {
    let ky = prob.apply_k(&sol.y);
    let mut s = IndexSets {
        inactive: vec![],
        active: vec![],
        strongly_active: vec![],
        biactive: vec![],
        eps_active,
        eps_q,
    };
    for j in 0..prob.m {
        if ky.row(j).norm() > eps_active {
            s.inactive.push(j);
        } else {
            s.active.push(j);
            if sol.q.row(j).norm() < 1.0 - eps_q {
                s.strongly_active.push(j);
            } else {
                s.biactive.push(j);
            }
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConeMode {
    /// `(Kv)_j` on the ray spanned by `q_j`.
    Cone,
    /// `(Kv)_j` on the line spanned by `q_j`.
    Line,
}

/// Linear description of the critical cone (or of a subspace built from it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSpec {
    pub zero_blocks: Vec<usize>,
    /// Block index and unit direction.
    pub ray_blocks: Vec<(usize, Vec<f64>)>,
}

impl ConeSpec {
    /// `(Kv)_j = 0` on the strongly active set, ray condition on the biactive set.
    pub fn critical_cone(sol: &VISolution, sets: &IndexSets) -> ConeSpec {
        ConeSpec {
            zero_blocks: sets.strongly_active.clone(),
            ray_blocks: sets.biactive.iter().map(|&j| (j, unit(sol.q.row(j).iter().copied().collect()))).collect(),
        }
    }

    /// Zero on `zero`, ray/line along `q_j` on `ray`.
    pub fn from_blocks(sol: &VISolution, zero: &[usize], ray: &[usize]) -> ConeSpec {
        ConeSpec {
            zero_blocks: zero.to_vec(),
            ray_blocks: ray.iter().map(|&j| (j, unit(sol.q.row(j).iter().copied().collect()))).collect(),
        }
    }

    pub fn validate(&self, prob: &VIProblem) -> Result<()> {
        let mut seen = vec![false; prob.m];
        for &j in &self.zero_blocks {
            if j >= prob.m {
                return Err(Error::BadInput(format!("unknown block index {j}")));
            }
            seen[j] = true;
        }
        for (j, dir) in &self.ray_blocks {
            if *j >= prob.m {
                return Err(Error::BadInput(format!("unknown block index {j}")));
            }
            if seen[*j] {
                return Err(Error::BadInput(format!("block {j} is both zero and ray")));
            }
            if dir.len() != prob.d {
                return Err(Error::Dimension(format!("ray direction of block {j} has length {}", dir.len())));
            }
            let nrm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (nrm - 1.0).abs() > 1e-10 {
                return Err(Error::BadInput(format!("ray direction of block {j} has norm {nrm}")));
            }
        }
        Ok(())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nrm > 0.0 {
        v.iter_mut().for_each(|x| *x /= nrm);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub member: bool,
    /// Block index and size of the violation, only for violated blocks.
    pub violations: Vec<(usize, f64)>,
}

pub fn cone_membership(
    spec: &ConeSpec,
    prob: &VIProblem,
    v: &DVector<f64>,
    tol: f64,
    mode: ConeMode,
) -> Result<MembershipReport> {
    spec.validate(prob)?;
    if v.len() != prob.n {
        return Err(Error::Dimension(format!("v has length {}, expected {}", v.len(), prob.n)));
    }
    let mut violations = Vec::new();
    for &j in &spec.zero_blocks {
        let nrm = prob.k_block(j, v).norm();
        if nrm > tol {
            violations.push((j, nrm));
        }
    }
    for (j, dir) in &spec.ray_blocks {
        let w = prob.k_block(*j, v);
        let dir = DVector::from_column_slice(dir);
        let along = dir.dot(&w);
        let defect = match mode {
            ConeMode::Cone => w.norm() - along,
            ConeMode::Line => (&w - along * &dir).norm(),
        };
        if defect > tol {
            violations.push((*j, defect));
        }
    }
    Ok(MembershipReport { member: violations.is_empty(), violations })
}

/// Membership through the dual description
/// `<K^T q, v> >= sum_I <(Ky)_j/|(Ky)_j|, (Kv)_j> + sum_A |(Kv)_j|`.
pub fn cone_membership_dual(prob: &VIProblem, sol: &VISolution, sets: &IndexSets, v: &DVector<f64>, tol: f64) -> bool {
    let ky = prob.apply_k(&sol.y);
    let kv = prob.apply_k(v);
    let lhs = prob.apply_kt(&sol.q).dot(v);
    let mut rhs = 0.0;
    for &j in &sets.inactive {
        let w = ky.row(j);
        rhs += w.dot(&kv.row(j)) / w.norm();
    }
    for &j in &sets.active {
        rhs += kv.row(j).norm();
    }
    lhs >= rhs - tol
}
