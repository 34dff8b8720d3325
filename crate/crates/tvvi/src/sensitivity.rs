//! Sensitivity of the solution map `S: u -> y`: slack selection, strict
//! complementarity detection, directional derivatives, Bouligand and Clarke
//! elements, generalized adjoints and difference quotients.
//!
//! Every derivative object solves one linear system of the form
//!
//! ```text
//! L eta + C^T z = h,    C eta = 0,
//! L = A + sum_{j in I} K_j^T T_j K_j,    T_j = (I - w_j w_j^T / |w_j|^2) / |w_j|,  w = Ky,
//! ```
//!
//! where `C` pins `(K eta)_j = 0` on "zero" blocks and `(K eta)_j` to the line
//! through `q_j` on "line" blocks. The multiplier `theta` is `T_j (K eta)_j` on
//! `I`, `z_j` on zero blocks and the component of `z` orthogonal to `q_j` on
//! line blocks.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, SaddleSolver};
use crate::solvers::{solve_vi_pdhg, PDHGConfig};
use crate::vi_core::{ConeSpec, IndexSets, VIProblem, VISolution};

/// Default cap on |B| for partition enumeration.
pub const DEFAULT_PARTITION_CAP: usize = 20;
/// Threshold on 1 - r_bar below which strict complementarity is certified.
pub const TOL_STRICT: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiactivePartition {
    pub b0: Vec<usize>,
    pub b1: Vec<usize>,
}

impl BiactivePartition {
    /// Everything in `B0`.
    pub fn all_zero(sets: &IndexSets) -> Self {
        BiactivePartition { b0: sets.biactive.clone(), b1: vec![] }
    }

    pub fn all_line(sets: &IndexSets) -> Self {
        BiactivePartition { b0: vec![], b1: sets.biactive.clone() }
    }

    /// Bit `i` of `mask` puts `B[i]` into `B1`.
    pub fn from_mask(sets: &IndexSets, mask: u64) -> Self {
        let mut p = BiactivePartition::default();
        for (i, &j) in sets.biactive.iter().enumerate() {
            if mask >> i & 1 == 1 {
                p.b1.push(j);
            } else {
                p.b0.push(j);
            }
        }
        p
    }

    pub fn validate(&self, sets: &IndexSets) -> Result<()> {
        let mut all: Vec<usize> = self.b0.iter().chain(&self.b1).copied().collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        let mut b = sets.biactive.clone();
        b.sort_unstable();
        if all.len() != n || all != b {
            return Err(Error::BadInput(format!(
                "partition b0={:?} b1={:?} does not split the biactive set {:?}",
                self.b0, self.b1, sets.biactive
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeKind {
    Directional,
    Frechet,
    BouligandElement,
    ClarkeElement,
}

#[derive(Clone, Debug)]
pub struct DerivativeResult {
    pub eta: DVector<f64>,
    /// `m x d`
    pub multiplier: DMatrix<f64>,
    pub kind: DerivativeKind,
    pub partition: Option<BiactivePartition>,
    /// `(j, <q_j, (K eta)_j>)` for the line blocks.
    pub ray_coefficients: Vec<(usize, f64)>,
    /// Relative residual of the linear system that produced `eta`.
    pub residual: f64,
    /// Whether the partition passed the multiplier sign test (directional
    /// derivatives only); otherwise it was selected by minimal objective.
    pub certified: bool,
}

#[derive(Clone, Debug)]
pub struct AdjointResult {
    pub p: DVector<f64>,
    pub lambda: DMatrix<f64>,
    pub partition: BiactivePartition,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlackCriterion {
    MinEuclidean,
    MinLinf,
}

#[derive(Clone, Debug)]
pub struct SlackSelection {
    pub q: DMatrix<f64>,
    pub r_bar: Option<f64>,
    pub criterion: SlackCriterion,
}

#[derive(Clone, Debug)]
pub enum FrechetStatus {
    Differentiable { q: DMatrix<f64>, r_bar: Option<f64> },
    NotDifferentiable { r_bar: f64 },
}

impl FrechetStatus {
    pub fn is_differentiable(&self) -> bool {
        matches!(self, FrechetStatus::Differentiable { .. })
    }
}

/// Orthonormal basis of the complement of the unit vector `q` in `R^d`, as columns.
fn orthogonal_complement(q: &DVector<f64>) -> DMatrix<f64> {
    let d = q.len();
    let mut m = DMatrix::identity(d, d);
    m.set_column(0, q);
    // a column of the identity that is nearly parallel to q would make QR unstable
    let k = q.iamax();
    if k != 0 {
        let mut e0 = DVector::zeros(d);
        e0[0] = 1.0;
        m.set_column(k, &e0);
    }
    let qr = m.qr();
    qr.q().columns(1, d - 1).into_owned()
}

/// `T_j` for a nonzero block `w`.
pub fn psi_second_derivative(w: &DVector<f64>) -> DMatrix<f64> {
    let nw = w.norm();
    let wh = w / nw;
    (DMatrix::identity(w.len(), w.len()) - &wh * wh.transpose()) / nw
}

/// `A + sum_{j in I} K_j^T T_j K_j`.
pub fn second_order_operator(prob: &VIProblem, y: &DVector<f64>, inactive: &[usize]) -> CsrMatrix {
    let w = prob.apply_k(y);
    let blocks: Vec<(usize, DMatrix<f64>)> =
        inactive.iter().map(|&j| (j, psi_second_derivative(&w.row(j).transpose()))).collect();
    let mut t = prob.a.triplets();
    t.extend(prob.block_gram_triplets(&blocks));
    CsrMatrix::from_triplets(prob.n, prob.n, &t)
}

enum RowKind {
    Zero(usize),
    Line(usize, DMatrix<f64>, DVector<f64>),
}

/// Factorized subspace system for fixed zero and line blocks; reusable for many right-hand sides.
pub struct SubspaceOperator<'p> {
    prob: &'p VIProblem,
    pub l: CsrMatrix,
    tblocks: Vec<(usize, DMatrix<f64>)>,
    rows: Vec<RowKind>,
    solver: SaddleSolver,
}

/// One solve of a [`SubspaceOperator`].
pub struct SubspaceSolve {
    pub eta: DVector<f64>,
    pub theta: DMatrix<f64>,
    /// Multipliers of the zero blocks.
    pub nu: Vec<(usize, DVector<f64>)>,
    pub ray_coefficients: Vec<(usize, f64)>,
    pub residual: f64,
}

impl<'p> SubspaceOperator<'p> {
    pub fn new(prob: &'p VIProblem, sol: &VISolution, inactive: &[usize], zero: &[usize], line: &[usize]) -> Result<Self> {
        let w = prob.apply_k(&sol.y);
        let tblocks: Vec<(usize, DMatrix<f64>)> =
            inactive.iter().map(|&j| (j, psi_second_derivative(&w.row(j).transpose()))).collect();
        let mut t = prob.a.triplets();
        t.extend(prob.block_gram_triplets(&tblocks));
        let l = CsrMatrix::from_triplets(prob.n, prob.n, &t);
        let d = prob.d;
        let mut ct = Vec::new();
        let mut r = 0usize;
        let mut rows = Vec::new();
        for &j in zero {
            for (a, row) in prob.block_rows(j).into_iter().enumerate() {
                for (c, v) in row {
                    ct.push((r + a, c, v));
                }
            }
            r += d;
            rows.push(RowKind::Zero(j));
        }
        for &j in line {
            let q = sol.q_row(j);
            let nq = q.norm();
            if nq < 0.5 {
                return Err(Error::BadInput(format!("line block {j} has |q_j| = {nq}")));
            }
            let q = q / nq;
            let basis = orthogonal_complement(&q);
            let brows = prob.block_rows(j);
            for k in 0..d - 1 {
                for (a, row) in brows.iter().enumerate() {
                    let coef = basis[(a, k)];
                    for &(c, v) in row {
                        ct.push((r + k, c, coef * v));
                    }
                }
            }
            r += d - 1;
            rows.push(RowKind::Line(j, basis, q));
        }
        let c = CsrMatrix::from_triplets(r, prob.n, &ct);
        let solver = SaddleSolver::new(&l, &c)?;
        Ok(SubspaceOperator { prob, l, tblocks, rows, solver })
    }

    pub fn apply(&self, h: &DVector<f64>) -> SubspaceSolve {
        let prob = self.prob;
        let d = prob.d;
        let s = self.solver.solve(h, &DVector::zeros(self.constraint_rows()));
        let eta = s.x;
        let keta = prob.apply_k(&eta);
        let mut theta = DMatrix::zeros(prob.m, d);
        for (j, t) in &self.tblocks {
            let v = t * keta.row(*j).transpose();
            theta.set_row(*j, &v.transpose());
        }
        let mut nu = Vec::new();
        let mut rays = Vec::new();
        let mut off = 0;
        for rk in &self.rows {
            match rk {
                RowKind::Zero(j) => {
                    let v = s.z.rows(off, d).into_owned();
                    theta.set_row(*j, &v.transpose());
                    nu.push((*j, v));
                    off += d;
                }
                RowKind::Line(j, basis, q) => {
                    let v = basis * s.z.rows(off, d - 1);
                    theta.set_row(*j, &v.transpose());
                    rays.push((*j, q.dot(&keta.row(*j).transpose())));
                    off += d - 1;
                }
            }
        }
        let residual = self.system_residual(h, &eta, &theta);
        SubspaceSolve { eta, theta, nu, ray_coefficients: rays, residual }
    }

    fn constraint_rows(&self) -> usize {
        self.rows
            .iter()
            .map(|r| match r {
                RowKind::Zero(_) => self.prob.d,
                RowKind::Line(..) => self.prob.d - 1,
            })
            .sum()
    }

    /// `|A eta + K^T theta - h|` plus the constraint and multiplier defects, relative to `max(1, |h|)`.
    pub fn system_residual(&self, h: &DVector<f64>, eta: &DVector<f64>, theta: &DMatrix<f64>) -> f64 {
        let prob = self.prob;
        let eq = (prob.a.mul_vec(eta) + prob.apply_kt(theta) - h).norm();
        let keta = prob.apply_k(eta);
        let mut worst = 0.0f64;
        for (j, t) in &self.tblocks {
            let v = t * keta.row(*j).transpose();
            worst = worst.max((v.transpose() - theta.row(*j)).norm());
        }
        for rk in &self.rows {
            match rk {
                RowKind::Zero(j) => worst = worst.max(keta.row(*j).norm()),
                RowKind::Line(j, _, q) => {
                    let w = keta.row(*j).transpose();
                    worst = worst.max((&w - q * q.dot(&w)).norm());
                    worst = worst.max(theta.row(*j).dot(&q.transpose()).abs());
                }
            }
        }
        eq.max(worst) / h.norm().max(1.0)
    }

    /// `1/2 <L eta, eta> - <h, eta>`.
    pub fn objective(&self, h: &DVector<f64>, eta: &DVector<f64>) -> f64 {
        0.5 * eta.dot(&self.l.mul_vec(eta)) - h.dot(eta)
    }
}

fn check_dim(prob: &VIProblem, h: &DVector<f64>) -> Result<()> {
    if h.len() != prob.n {
        return Err(Error::Dimension(format!("direction has length {}, expected {}", h.len(), prob.n)));
    }
    Ok(())
}

/// Affine constraint `K_A^T q_A = u - Ay - K_I^T q_I` in the unknowns `q_A`,
/// restricted to the state components it touches.
struct SlackAffine {
    active: Vec<usize>,
    d: usize,
    solver: SaddleSolver,
    rhs: DVector<f64>,
    cmat: CsrMatrix,
}

impl SlackAffine {
    fn new(prob: &VIProblem, sol: &VISolution, sets: &IndexSets) -> Result<Self> {
        let d = prob.d;
        let active = sets.active.clone();
        let mut q_i = sol.q.clone();
        for &j in &active {
            q_i.row_mut(j).fill(0.0);
        }
        let full_rhs = &prob.u - prob.a.mul_vec(&sol.y) - prob.apply_kt(&q_i);
        let mut touched = vec![usize::MAX; prob.n];
        let mut nodes = Vec::new();
        let mut t = Vec::new();
        for (k, &j) in active.iter().enumerate() {
            for (a, row) in prob.block_rows(j).into_iter().enumerate() {
                for (c, v) in row {
                    if touched[c] == usize::MAX {
                        touched[c] = nodes.len();
                        nodes.push(c);
                    }
                    t.push((touched[c], k * d + a, v));
                }
            }
        }
        let outside: f64 = (0..prob.n).filter(|&i| touched[i] == usize::MAX).map(|i| full_rhs[i].powi(2)).sum();
        if outside.sqrt() > 1e-8 * (1.0 + prob.u.norm()) {
            return Err(Error::Infeasible(format!(
                "state equation residual {:e} outside the span of the active blocks",
                outside.sqrt()
            )));
        }
        let cmat = CsrMatrix::from_triplets(nodes.len(), active.len() * d, &t);
        let rhs = DVector::from_fn(nodes.len(), |i, _| full_rhs[nodes[i]]);
        let solver = SaddleSolver::new(&CsrMatrix::identity(active.len() * d), &cmat)?;
        Ok(SlackAffine { active, d, solver, rhs, cmat })
    }

    fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        // [I C^T; C 0][p; z] = [x; b] gives the projection p of x onto {Cp = b}
        self.solver.solve(x, &self.rhs).x
    }

    fn defect(&self, x: &DVector<f64>) -> f64 {
        (self.cmat.mul_vec(x) - &self.rhs).norm()
    }

    fn dim(&self) -> usize {
        self.active.len() * self.d
    }
}

fn project_balls(x: &mut DVector<f64>, d: usize, radius: f64) {
    for b in 0..x.len() / d {
        let mut blk = x.rows_mut(b * d, d);
        let nrm = blk.norm();
        if nrm > radius {
            blk *= radius / nrm;
        }
    }
}

fn assemble_slack(sol: &VISolution, aff: &SlackAffine, x: &DVector<f64>) -> DMatrix<f64> {
    let mut q = sol.q.clone();
    for (k, &j) in aff.active.iter().enumerate() {
        for a in 0..aff.d {
            q[(j, a)] = x[k * aff.d + a];
        }
    }
    q
}

/// Slack of least Euclidean norm on the active set (Dykstra's alternating
/// projections between the affine state-equation set and the unit balls).
pub fn min_euclidean_slack(prob: &VIProblem, sol: &VISolution, sets: &IndexSets) -> Result<SlackSelection> {
    if sets.active.is_empty() {
        return Ok(SlackSelection { q: sol.q.clone(), r_bar: None, criterion: SlackCriterion::MinEuclidean });
    }
    let aff = SlackAffine::new(prob, sol, sets)?;
    let dim = aff.dim();
    let mut x = DVector::zeros(dim);
    let mut p_corr: DVector<f64> = DVector::zeros(dim);
    let mut q_corr: DVector<f64> = DVector::zeros(dim);
    let tol = 1e-10;
    for _ in 0..200_000 {
        let prev = x.clone();
        let yv = aff.project(&(&x + &p_corr));
        p_corr = &x + &p_corr - &yv;
        let mut xn = &yv + &q_corr;
        project_balls(&mut xn, aff.d, 1.0);
        q_corr = &yv + &q_corr - &xn;
        x = xn;
        if (&x - &prev).norm() <= tol && aff.defect(&x) <= tol * (1.0 + aff.rhs.norm()) {
            break;
        }
    }
    if aff.defect(&x) > 1e-7 * (1.0 + aff.rhs.norm()) {
        return Err(Error::Infeasible(format!("affine defect {:e} after projections", aff.defect(&x))));
    }
    Ok(SlackSelection { q: assemble_slack(sol, &aff, &x), r_bar: None, criterion: SlackCriterion::MinEuclidean })
}

/// Alternating projections between the affine set and the `sqrt(r)`-balls;
/// returns the last ball-feasible point when the gap drops below 1e-9.
fn linf_feasible(aff: &SlackAffine, r: f64, start: &DVector<f64>) -> Option<DVector<f64>> {
    let rad = r.max(0.0).sqrt();
    let mut x = start.clone();
    let mut last_gap = f64::INFINITY;
    for it in 0..50_000 {
        let yv = aff.project(&x);
        let mut xb = yv.clone();
        project_balls(&mut xb, aff.d, rad);
        let gap = (&yv - &xb).norm();
        if gap < 1e-9 {
            return Some(xb);
        }
        if it > 50 && last_gap - gap < 1e-13 * last_gap.max(1e-300) {
            return None;
        }
        last_gap = gap;
        x = xb;
    }
    None
}

/// Slack minimizing `max_{j in A} |q_j|^2` (bisection on the bound `r`).
pub fn min_linf_slack(prob: &VIProblem, sol: &VISolution, sets: &IndexSets) -> Result<SlackSelection> {
    if sets.active.is_empty() {
        return Ok(SlackSelection { q: sol.q.clone(), r_bar: Some(0.0), criterion: SlackCriterion::MinLinf });
    }
    let aff = SlackAffine::new(prob, sol, sets)?;
    let start = DVector::from_fn(aff.dim(), |i, _| {
        let k = i / aff.d;
        sol.q[(aff.active[k], i % aff.d)]
    });
    let mut best = linf_feasible(&aff, 1.0, &start).ok_or_else(|| Error::Infeasible("no slack with |q_j| <= 1".into()))?;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        match linf_feasible(&aff, mid, &best) {
            Some(x) => {
                hi = mid;
                best = x;
            }
            None => lo = mid,
        }
    }
    Ok(SlackSelection { q: assemble_slack(sol, &aff, &best), r_bar: Some(hi), criterion: SlackCriterion::MinLinf })
}

/// Strict complementarity test: the incumbent slack first, then the min-l_inf slack.
pub fn frechet_check(prob: &VIProblem, sol: &VISolution, sets: &IndexSets) -> Result<FrechetStatus> {
    let incumbent = sets.active.iter().map(|&j| sol.q.row(j).norm()).fold(0.0, f64::max);
    if incumbent < 1.0 - TOL_STRICT {
        return Ok(FrechetStatus::Differentiable { q: sol.q.clone(), r_bar: None });
    }
    let s = min_linf_slack(prob, sol, sets)?;
    let r = s.r_bar.unwrap();
    if r < 1.0 - TOL_STRICT {
        Ok(FrechetStatus::Differentiable { q: s.q, r_bar: Some(r) })
    } else {
        Ok(FrechetStatus::NotDifferentiable { r_bar: r })
    }
}

/// Derivative under strict complementarity: `(K eta)_j = 0` on all of `A`.
pub fn frechet_derivative(prob: &VIProblem, sol: &VISolution, sets: &IndexSets, h: &DVector<f64>) -> Result<DerivativeResult> {
    check_dim(prob, h)?;
    let op = SubspaceOperator::new(prob, sol, &sets.inactive, &sets.active, &[])?;
    let s = op.apply(h);
    Ok(DerivativeResult {
        eta: s.eta,
        multiplier: s.theta,
        kind: DerivativeKind::Frechet,
        partition: None,
        ray_coefficients: vec![],
        residual: s.residual,
        certified: true,
    })
}

pub fn bouligand_element_apply(
    prob: &VIProblem,
    sol: &VISolution,
    sets: &IndexSets,
    partition: &BiactivePartition,
    h: &DVector<f64>,
) -> Result<DerivativeResult> {
    check_dim(prob, h)?;
    partition.validate(sets)?;
    let zero: Vec<usize> = sets.strongly_active.iter().chain(&partition.b0).copied().collect();
    let op = SubspaceOperator::new(prob, sol, &sets.inactive, &zero, &partition.b1)?;
    let s = op.apply(h);
    Ok(DerivativeResult {
        eta: s.eta,
        multiplier: s.theta,
        kind: DerivativeKind::BouligandElement,
        partition: Some(partition.clone()),
        ray_coefficients: s.ray_coefficients,
        residual: s.residual,
        certified: true,
    })
}

/// Element of the generalized Jacobian with line conditions on all of `B`.
pub fn clarke_element_apply(prob: &VIProblem, sol: &VISolution, sets: &IndexSets, h: &DVector<f64>) -> Result<DerivativeResult> {
    let mut r = bouligand_element_apply(prob, sol, sets, &BiactivePartition::all_line(sets), h)?;
    r.kind = DerivativeKind::ClarkeElement;
    Ok(r)
}

pub fn adjoint_solve(
    prob: &VIProblem,
    sol: &VISolution,
    sets: &IndexSets,
    partition: &BiactivePartition,
    rhs: &DVector<f64>,
) -> Result<AdjointResult> {
    let r = bouligand_element_apply(prob, sol, sets, partition, rhs)?;
    Ok(AdjointResult { p: r.eta, lambda: r.multiplier, partition: partition.clone(), residual: r.residual })
}

/// Generators of the critical cone: a projector onto its lineality space
/// `{v : (Kv)_j = 0 on A_s and B}` and one least-norm representative per
/// biactive ray (`(Kv)_j = q_j`, zero on the other constrained blocks).
pub struct ConeGenerators {
    solver: Option<SaddleSolver>,
    /// `(j, representative)`; `None` when no representative exists.
    pub rays: Vec<(usize, Option<DVector<f64>>)>,
}

impl ConeGenerators {
    pub fn new(prob: &VIProblem, sol: &VISolution, sets: &IndexSets) -> Result<Self> {
        let d = prob.d;
        let blocks: Vec<usize> = sets.strongly_active.iter().chain(&sets.biactive).copied().collect();
        if blocks.is_empty() {
            return Ok(ConeGenerators { solver: None, rays: vec![] });
        }
        let mut t = Vec::new();
        for (k, &j) in blocks.iter().enumerate() {
            for (a, row) in prob.block_rows(j).into_iter().enumerate() {
                for (c, v) in row {
                    t.push((k * d + a, c, v));
                }
            }
        }
        let c = CsrMatrix::from_triplets(blocks.len() * d, prob.n, &t);
        let solver = SaddleSolver::new(&CsrMatrix::identity(prob.n), &c)?;
        let mut rays = Vec::new();
        let off = sets.strongly_active.len();
        for (i, &j) in sets.biactive.iter().enumerate() {
            let q = sol.q_row(j);
            let q = &q / q.norm();
            let mut b = DVector::zeros(blocks.len() * d);
            b.rows_mut((off + i) * d, d).copy_from(&q);
            let v = solver.solve(&DVector::zeros(prob.n), &b).x;
            let defect = (c.mul_vec(&v) - &b).norm();
            if defect <= 1e-8 {
                rays.push((j, Some(v)));
            } else {
                log::warn!("{}", Error::RayRepresentativeInfeasible(j));
                rays.push((j, None));
            }
        }
        Ok(ConeGenerators { solver: Some(solver), rays })
    }

    /// Orthogonal projection onto the lineality space.
    pub fn project_lineality(&self, r: &DVector<f64>) -> DVector<f64> {
        match &self.solver {
            None => r.clone(),
            Some(s) => s.solve(r, &DVector::zeros(s.constraint_rows())).x,
        }
    }
}

/// Pairing checks of a gradient `g` against the cone generators: the norm of
/// its lineality component and the smallest pairing with a ray representative.
pub fn polar_defects(gen: &ConeGenerators, g: &DVector<f64>) -> (f64, f64) {
    let lin = gen.project_lineality(g).norm();
    let ray = gen
        .rays
        .iter()
        .filter_map(|(_, v)| v.as_ref().map(|v| v.dot(g)))
        .fold(f64::INFINITY, f64::min);
    (lin, if ray.is_finite() { ray } else { 0.0 })
}

/// `S'(u; h)`: solution of the cone-constrained QP
/// `min 1/2 <L eta, eta> - <h, eta>` over the critical cone, found by
/// enumerating partitions of `B`.
///
/// A partition whose ray coefficients are nonnegative and whose zero-block
/// multipliers satisfy `<nu_j, q_j> <= tol` on `B0` is returned at once.
/// When multipliers are not unique the sign test can miss; then the
/// cone-feasible candidate with the least objective is returned, which is the
/// QP minimizer because every face minimizer is the subspace solution of some
/// partition.
pub fn directional_derivative(
    prob: &VIProblem,
    sol: &VISolution,
    sets: &IndexSets,
    h: &DVector<f64>,
    cap: usize,
) -> Result<DerivativeResult> {
    DirectionalSolver::new(prob, sol, sets, cap)?.derivative(h)
}

/// Directional derivatives at a fixed solution, caching one factorized
/// system per visited partition so that many directions are cheap.
pub struct DirectionalSolver<'p> {
    prob: &'p VIProblem,
    sol: &'p VISolution,
    sets: &'p IndexSets,
    cache: RefCell<HashMap<u64, Rc<SubspaceOperator<'p>>>>,
}

impl<'p> DirectionalSolver<'p> {
    pub fn new(prob: &'p VIProblem, sol: &'p VISolution, sets: &'p IndexSets, cap: usize) -> Result<Self> {
        let nb = sets.biactive.len();
        if nb > cap.min(63) {
            return Err(Error::PartitionCapExceeded { size: nb, cap, iteration: None });
        }
        Ok(DirectionalSolver { prob, sol, sets, cache: RefCell::new(HashMap::new()) })
    }

    fn operator(&self, mask: u64) -> Result<Rc<SubspaceOperator<'p>>> {
        if let Some(op) = self.cache.borrow().get(&mask) {
            return Ok(op.clone());
        }
        let part = BiactivePartition::from_mask(self.sets, mask);
        let zero: Vec<usize> = self.sets.strongly_active.iter().chain(&part.b0).copied().collect();
        let op = Rc::new(SubspaceOperator::new(self.prob, self.sol, &self.sets.inactive, &zero, &part.b1)?);
        self.cache.borrow_mut().insert(mask, op.clone());
        Ok(op)
    }

    pub fn derivative(&self, h: &DVector<f64>) -> Result<DerivativeResult> {
        check_dim(self.prob, h)?;
        let nb = self.sets.biactive.len();
        let tol = 1e-9 * h.norm().max(1.0);
        let mut best: Option<(f64, DerivativeResult)> = None;
        for mask in 0..(1u64 << nb) {
            let part = BiactivePartition::from_mask(self.sets, mask);
            let op = self.operator(mask)?;
            let s = op.apply(h);
            if !s.ray_coefficients.iter().all(|&(_, c)| c >= -tol) {
                continue;
            }
            let signs = s
                .nu
                .iter()
                .filter(|(j, _)| part.b0.contains(j))
                .all(|(j, nu)| nu.dot(&self.sol.q_row(*j)) <= tol);
            let obj = op.objective(h, &s.eta);
            let res = DerivativeResult {
                eta: s.eta,
                multiplier: s.theta,
                kind: DerivativeKind::Directional,
                partition: Some(part),
                ray_coefficients: s.ray_coefficients,
                residual: s.residual,
                certified: signs,
            };
            if signs {
                return Ok(res);
            }
            if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                best = Some((obj, res));
            }
        }
        best.map(|(_, r)| r)
            .ok_or_else(|| Error::NoValidPartition(format!("none of {} partitions is cone feasible", 1u64 << nb)))
    }
}

/// Defects of a directional derivative: cone membership, the lineality part
/// of `L eta - h`, the least pairing of `L eta - h` with a ray generator, and
/// `|<L eta - h, eta>|`.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct DirectionalCheck {
    pub cone_defect: f64,
    pub lineality_defect: f64,
    pub min_ray_pairing: f64,
    pub complementarity: f64,
}

pub fn verify_directional(
    prob: &VIProblem,
    sol: &VISolution,
    sets: &IndexSets,
    h: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<DirectionalCheck> {
    let spec = ConeSpec::critical_cone(sol, sets);
    let keta = prob.apply_k(eta);
    let mut cone_defect = 0.0f64;
    for &j in &spec.zero_blocks {
        cone_defect = cone_defect.max(keta.row(j).norm());
    }
    for (j, dir) in &spec.ray_blocks {
        let w = keta.row(*j).transpose();
        let dir = DVector::from_column_slice(dir);
        cone_defect = cone_defect.max(w.norm() - dir.dot(&w));
    }
    let l = second_order_operator(prob, &sol.y, &sets.inactive);
    let g = l.mul_vec(eta) - h;
    let gen = ConeGenerators::new(prob, sol, sets)?;
    let (lin, ray) = polar_defects(&gen, &g);
    Ok(DirectionalCheck { cone_defect, lineality_defect: lin, min_ray_pairing: ray, complementarity: g.dot(eta).abs() })
}

/// Directional derivative together with the partition reproducing it as a
/// Bouligand element: `B0 = {j in B : (K eta)_j = 0}`.
pub fn linear_representative(
    prob: &VIProblem,
    sol: &VISolution,
    sets: &IndexSets,
    h: &DVector<f64>,
    cap: usize,
) -> Result<(DerivativeResult, BiactivePartition)> {
    let dd = directional_derivative(prob, sol, sets, h, cap)?;
    let keta = prob.apply_k(&dd.eta);
    let tol = 1e-9 * dd.eta.norm().max(h.norm()).max(1e-300);
    let mut part = BiactivePartition::default();
    for &j in &sets.biactive {
        if keta.row(j).norm() <= tol {
            part.b0.push(j);
        } else {
            part.b1.push(j);
        }
    }
    let el = bouligand_element_apply(prob, sol, sets, &part, h)?;
    let gap = (&el.eta - &dd.eta).norm();
    if gap > 1e-9 * h.norm().max(1.0) {
        return Err(Error::Numerical(format!("linear representative differs from S'(u;h) by {gap:e}")));
    }
    Ok((dd, part))
}

/// `(S(u + t h) - S(u)) / t` with the primal-dual solver at tolerance `tol`.
pub fn difference_quotient(prob: &VIProblem, u: &DVector<f64>, h: &DVector<f64>, t: f64, tol: f64) -> Result<DVector<f64>> {
    if !(t > 0.0) {
        return Err(Error::BadInput("t must be positive".into()));
    }
    if h.iter().all(|&x| x == 0.0) {
        return Ok(DVector::zeros(prob.n));
    }
    let cfg = PDHGConfig { tol, ..Default::default() };
    let base = solve_vi_pdhg(&prob.with_control(u.clone()), &cfg, None)?;
    let pert = solve_vi_pdhg(&prob.with_control(u + h * t), &cfg, Some(&base))?;
    Ok((pert.y - base.y) / t)
}
