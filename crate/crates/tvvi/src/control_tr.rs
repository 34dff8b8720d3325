//! Two-phase nonsmooth trust-region method for `min_u f(u) = J(S(u), u)`.
//!
//! Phase `Standard` (radius above `delta_min`) takes dogleg steps on the BFGS
//! model built from one Bouligand subgradient. Phase `Modified` (radius at or
//! below `delta_min`) collects the subgradients of every partition of the
//! possibly biactive blocks and takes a generalized Cauchy step against the
//! minimum-norm point of their hull.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::smallest_eigenvalue_spd;
use crate::sensitivity::{adjoint_solve, min_euclidean_slack, BiactivePartition, SubspaceOperator};
use crate::solvers::{solve_vi_pdhg, solve_vi_ssn, PDHGConfig, SSNConfig};
use crate::stationarity::CostFunction;
use crate::vi_core::{IndexSets, VIProblem, VISolution};

/// Solver used for every lower-level VI solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LowerSolver {
    Ssn(SSNConfig),
    Pdhg(PDHGConfig),
}

impl Default for LowerSolver {
    fn default() -> Self {
        LowerSolver::Ssn(SSNConfig::default())
    }
}

impl LowerSolver {
    pub fn solve(&self, prob: &VIProblem, warm: Option<&VISolution>) -> Result<VISolution> {
        match self {
            LowerSolver::Ssn(c) => solve_vi_ssn(prob, c, warm.map(|s| &s.y)),
            LowerSolver::Pdhg(c) => solve_vi_pdhg(prob, c, warm),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TRConfig {
    pub delta0: f64,
    pub delta_min: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mu: f64,
    pub dogleg_beta: f64,
    pub dogleg_delta: f64,
    /// Stop when `|u_{k+1} - u_k| / |u_0| < stop_tol` on a successful step.
    pub stop_tol: f64,
    pub max_iter: usize,
    /// Lipschitz constant of `S`; `None` uses `1 / lambda_min(A)`.
    pub lipschitz_ly: Option<f64>,
    pub partition_cap_phase2: usize,
    /// Stop in the modified phase once `psi <= psi_tol`.
    pub psi_tol: f64,
    pub stop_rule: StopRule,
}

/// When the relative-step test `|u_{k+1} - u_k| / |u_0| < stop_tol` is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    /// After every iteration; a null step has `u_{k+1} = u_k` and stops the run.
    #[default]
    EveryIteration,
    /// Only after successful steps, so null steps keep shrinking the radius
    /// and can reach the modified phase.
    SuccessfulSteps,
}

impl Default for TRConfig {
    fn default() -> Self {
        TRConfig {
            delta0: 10.0,
            delta_min: 1e-6,
            eta1: 0.25,
            eta2: 0.75,
            beta1: 0.5,
            beta2: 1.3,
            mu: 1.0,
            dogleg_beta: 1.0,
            dogleg_delta: 0.8,
            stop_tol: 1e-4,
            max_iter: 500,
            lipschitz_ly: None,
            partition_cap_phase2: 12,
            psi_tol: 1e-8,
            stop_rule: StopRule::EveryIteration,
        }
    }
}

impl TRConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.eta1
            && self.eta1 < self.eta2
            && self.eta2 < 1.0
            && 0.0 < self.beta1
            && self.beta1 < 1.0
            && 1.0 < self.beta2
            && 0.0 < self.mu
            && self.mu <= 1.0
            && self.delta0 > self.delta_min
            && self.delta_min > 0.0
            && self.dogleg_beta >= 1.0
            && 0.0 < self.dogleg_delta
            && self.dogleg_delta <= 1.0
            && self.stop_tol > 0.0
            && self.psi_tol >= 0.0
            && self.lipschitz_ly.map_or(true, |l| l > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::BadInput(format!("invalid trust-region constants: {self:?}")))
        }
    }

    /// New radius for a given quality indicator.
    pub fn radius_update(&self, rho: f64, delta: f64) -> f64 {
        if rho <= self.eta1 {
            self.beta1 * delta
        } else if rho <= self.eta2 {
            self.delta_min.max(delta)
        } else {
            self.delta_min.max(self.beta2 * delta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Standard,
    Modified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Null,
    Successful,
    /// Terminal iteration without a step (zero gradient or small psi).
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TRRecord {
    pub iter: usize,
    pub f: f64,
    pub grad_norm: f64,
    pub delta: f64,
    pub delta_next: f64,
    pub rho: f64,
    pub phase: Phase,
    pub step: StepKind,
    pub psi: Option<f64>,
    pub step_norm: f64,
    /// `f` at the trial point (equal to `f` when no step was tried).
    pub f_trial: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TRTrace {
    pub records: Vec<TRRecord>,
}

impl TRTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,f,grad_norm,delta,rho,phase,step,psi\n");
        for r in &self.records {
            let phase = match r.phase {
                Phase::Standard => "standard",
                Phase::Modified => "modified",
            };
            let step = match r.step {
                StepKind::Null => "null",
                StepKind::Successful => "successful",
                StepKind::None => "none",
            };
            let psi = r.psi.map(crate::io::fmt_f64).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                crate::io::fmt_f64(r.f),
                crate::io::fmt_f64(r.grad_norm),
                crate::io::fmt_f64(r.delta),
                crate::io::fmt_f64(r.rho),
                phase,
                step,
                psi
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    RelativeStep,
    ZeroGradient,
    PsiSmall,
    /// The radius fell below the floating-point resolution of `u`.
    RadiusUnderflow,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct TROutput {
    pub u: DVector<f64>,
    pub y: DVector<f64>,
    pub p: DVector<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: TRTrace,
    pub solution: VISolution,
}

/// Which biactive blocks get `(K p)_j = 0` in the adjoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartitionPolicy {
    /// `B0 = B`.
    #[default]
    AllZero,
    AllLine,
    /// Bit `i` puts `B[i]` into `B1`.
    Mask(u64),
}

impl PartitionPolicy {
    pub fn partition(&self, sets: &IndexSets) -> BiactivePartition {
        match self {
            PartitionPolicy::AllZero => BiactivePartition::all_zero(sets),
            PartitionPolicy::AllLine => BiactivePartition::all_line(sets),
            PartitionPolicy::Mask(m) => BiactivePartition::from_mask(sets, *m),
        }
    }
}

/// Lower-level solution plus the subgradient built on it.
#[derive(Clone, Debug)]
pub struct GradientEval {
    pub sol: VISolution,
    pub sets: IndexSets,
    pub f: f64,
    pub p: DVector<f64>,
    pub g: DVector<f64>,
}

/// `g = p + grad_u J` with `p` the generalized adjoint for a fixed solution.
pub fn gradient_from_solution(
    prob: &VIProblem,
    cost: &dyn CostFunction,
    sol: &VISolution,
    sets: &IndexSets,
    policy: PartitionPolicy,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let u = &prob.u;
    let gy = cost.grad_y(&sol.y, u);
    let gu = cost.grad_u(&sol.y, u);
    let part = policy.partition(sets);
    if matches!(policy, PartitionPolicy::AllLine | PartitionPolicy::Mask(_)) {
        // line blocks need the slack of least norm
        let q = min_euclidean_slack(prob, sol, sets)?.q;
        let s2 = sol.with_slack(prob, q);
        let p = adjoint_solve(prob, &s2, sets, &part, &gy)?.p;
        return Ok((&p + gu, p));
    }
    let p = adjoint_solve(prob, sol, sets, &part, &gy)?.p;
    Ok((&p + gu, p))
}

/// Solves the VI at `u` and returns the subgradient under `policy`.
pub fn generalized_gradient(
    prob: &VIProblem,
    cost: &dyn CostFunction,
    lower: &LowerSolver,
    u: &DVector<f64>,
    policy: PartitionPolicy,
) -> Result<GradientEval> {
    let pu = prob.with_control(u.clone());
    let sol = lower.solve(&pu, None)?;
    let sets = sol.sets(&pu);
    let f = cost.eval(&sol.y, u);
    let (g, p) = gradient_from_solution(&pu, cost, &sol, &sets, policy)?;
    Ok(GradientEval { sol, sets, f, p, g })
}

/// Model decrease `-g^T s - 1/2 s^T H s`.
pub fn predicted_reduction(g: &DVector<f64>, h: &DMatrix<f64>, s: &DVector<f64>) -> f64 {
    -g.dot(s) - 0.5 * s.dot(&(h * s))
}

/// Cauchy step along `-g`.
pub fn cauchy_step(g: &DVector<f64>, h: &DMatrix<f64>, delta: f64) -> DVector<f64> {
    let gn = g.norm();
    let ghg = g.dot(&(h * g));
    let t = if ghg <= 0.0 { delta / gn } else { (gn * gn / ghg).min(delta / gn) };
    -g * t
}

/// Dogleg choice with a precomputed Newton step (`None` when `H` is singular).
pub fn dogleg_with_newton(
    g: &DVector<f64>,
    h: &DMatrix<f64>,
    delta: f64,
    newton: Option<DVector<f64>>,
    beta: f64,
    frac: f64,
) -> DVector<f64> {
    let sc = cauchy_step(g, h, delta);
    if let Some(sn) = newton {
        if sn.iter().all(|v| v.is_finite())
            && sn.norm() <= beta * delta
            && predicted_reduction(g, h, &sn) >= frac * predicted_reduction(g, h, &sc)
        {
            return sn;
        }
    }
    sc
}

/// Newton step if it is short enough and achieves the fraction of Cauchy
/// decrease, otherwise the Cauchy step. Requires `g != 0`.
pub fn dogleg_step(g: &DVector<f64>, h: &DMatrix<f64>, delta: f64, beta: f64, frac: f64) -> DVector<f64> {
    let newton = h.clone().lu().solve(g).map(|x| -x);
    dogleg_with_newton(g, h, delta, newton, beta, frac)
}

/// Rank-two BFGS update of `H` with step `s` and gradient change `z`; skipped
/// when `<s, z> <= 1e-12 |s| |z|`.
pub fn bfgs_update(h: &DMatrix<f64>, s: &DVector<f64>, z: &DVector<f64>) -> DMatrix<f64> {
    let sz = s.dot(z);
    if !(sz > 1e-12 * s.norm() * z.norm()) {
        return h.clone();
    }
    let hs = h * s;
    let shs = s.dot(&hs);
    let mut out = h - &hs * hs.transpose() / shs + z * z.transpose() / sz;
    symmetrize(&mut out);
    out
}

/// Matching update of `H^{-1}`.
fn bfgs_inverse_update(hi: &mut DMatrix<f64>, s: &DVector<f64>, z: &DVector<f64>) {
    let sz = s.dot(z);
    if !(sz > 1e-12 * s.norm() * z.norm()) {
        return;
    }
    let r = 1.0 / sz;
    let hz = &*hi * z;
    let zhz = z.dot(&hz);
    // (I - r s z^T) Hi (I - r z s^T) + r s s^T
    let upd = (s * hz.transpose() + &hz * s.transpose()) * (-r) + s * s.transpose() * (r + r * r * zhz);
    *hi += upd;
    symmetrize(hi);
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Spectral norm of a symmetric matrix by power iteration.
pub fn symmetric_norm(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..500 {
        let w = h * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let done = (nw - lam).abs() <= 1e-12 * nw;
        lam = nw;
        v = w / nw;
        if done {
            break;
        }
    }
    lam
}

/// `P = {i : |(Ky)_i| <= L_y delta and |q_i| >= 1 - L_y delta}` and
/// `A_v = {i : |q_i| < 1 - L_y delta}`.
pub fn identify_possible_biactive(
    prob: &VIProblem,
    sol: &VISolution,
    delta: f64,
    ly: f64,
    cap: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let w = prob.apply_k(&sol.y);
    let r = ly * delta;
    let mut p = Vec::new();
    let mut av = Vec::new();
    for j in 0..prob.m {
        let qn = sol.q.row(j).norm();
        if w.row(j).norm() <= r && qn >= 1.0 - r {
            p.push(j);
        }
        if qn < 1.0 - r {
            av.push(j);
        }
    }
    if p.len() > cap {
        return Err(Error::PartitionCapExceeded { size: p.len(), cap, iteration: None });
    }
    Ok((p, av))
}

/// Minimum-norm point `w` of `conv{g_j}` (Wolfe's method on the Gram
/// matrix); `psi = |w| = -min_{|d| <= 1} max_j <g_j, d>`.
pub fn psi_measure(gradients: &[DVector<f64>]) -> Result<(f64, DVector<f64>)> {
    let k = gradients.len();
    if k == 0 {
        return Err(Error::BadInput("psi_measure needs at least one gradient".into()));
    }
    let n = gradients[0].len();
    if gradients.iter().any(|g| g.len() != n) {
        return Err(Error::Dimension("gradients differ in length".into()));
    }
    let gram = DMatrix::from_fn(k, k, |i, j| gradients[i].dot(&gradients[j]));
    let lam = min_norm_simplex(&gram);
    let mut w = DVector::zeros(n);
    for (i, g) in gradients.iter().enumerate() {
        if lam[i] != 0.0 {
            w.axpy(lam[i], g, 1.0);
        }
    }
    Ok((w.norm(), w))
}

/// Barycentric weights of the min-norm point for Gram matrix `gram`.
fn min_norm_simplex(gram: &DMatrix<f64>) -> Vec<f64> {
    let k = gram.nrows();
    let scale = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-10;
    let start = (0..k).min_by(|&a, &b| gram[(a, a)].total_cmp(&gram[(b, b)])).unwrap();
    let mut lam = vec![0.0; k];
    lam[start] = 1.0;
    let mut support = vec![start];
    // gx[i] = <x, g_i>
    let gx = |lam: &[f64]| -> DVector<f64> { DVector::from_fn(k, |i, _| (0..k).map(|j| gram[(i, j)] * lam[j]).sum()) };
    for _ in 0..(50 * k + 100) {
        let v = gx(&lam);
        let xx: f64 = (0..k).map(|i| lam[i] * v[i]).sum();
        let j = (0..k).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        if xx - v[j] <= tol * scale || support.contains(&j) {
            break;
        }
        support.push(j);
        loop {
            let alpha = affine_min_norm(gram, &support);
            if alpha.iter().all(|&a| a > 1e-14) {
                for (s, &i) in support.iter().enumerate() {
                    lam[i] = alpha[s];
                }
                break;
            }
            let mut theta = 1.0f64;
            for (s, &i) in support.iter().enumerate() {
                if alpha[s] <= 1e-14 {
                    let den = lam[i] - alpha[s];
                    if den > 0.0 {
                        theta = theta.min(lam[i] / den);
                    }
                }
            }
            for (s, &i) in support.iter().enumerate() {
                lam[i] += theta * (alpha[s] - lam[i]);
            }
            let before = support.len();
            support.retain(|&i| lam[i] > 1e-14);
            for i in 0..k {
                if !support.contains(&i) {
                    lam[i] = 0.0;
                }
            }
            if support.len() == before {
                // numerical stall: drop the smallest weight
                let (pos, _) = support.iter().enumerate().min_by(|a, b| lam[*a.1].total_cmp(&lam[*b.1])).unwrap();
                lam[support[pos]] = 0.0;
                support.remove(pos);
            }
            let tot: f64 = support.iter().map(|&i| lam[i]).sum();
            for &i in &support {
                lam[i] /= tot;
            }
        }
    }
    lam
}

/// Weights of the min-norm point of the affine hull of `support`.
fn affine_min_norm(gram: &DMatrix<f64>, support: &[usize]) -> Vec<f64> {
    let s = support.len();
    let mut m = DMatrix::zeros(s + 1, s + 1);
    for a in 0..s {
        for b in 0..s {
            m[(a, b)] = gram[(support[a], support[b])];
        }
        m[(a, s)] = 1.0;
        m[(s, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(s + 1);
    rhs[s] = 1.0;
    let sol = m.clone().svd(true, true).solve(&rhs, 1e-14 * m.amax()).unwrap_or(rhs);
    sol.rows(0, s).iter().copied().collect()
}

/// Generalized Cauchy step `d = -t delta w/|w|`, `t = min(1, psi / (delta |H|))`,
/// with `zeta = max_j <g_j, d>`.
pub fn modified_subproblem(
    gradients: &[DVector<f64>],
    h: &DMatrix<f64>,
    delta: f64,
    mu: f64,
) -> Result<(DVector<f64>, f64)> {
    let (psi, w) = psi_measure(gradients)?;
    if psi == 0.0 {
        return Err(Error::DegeneratePsiZero);
    }
    let hn = symmetric_norm(h);
    modified_step(gradients, h, hn, delta, mu, psi, &w)
}

fn modified_step(
    gradients: &[DVector<f64>],
    h: &DMatrix<f64>,
    hn: f64,
    delta: f64,
    mu: f64,
    psi: f64,
    w: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    let t = if hn == 0.0 { 1.0 } else { (psi / (delta * hn)).min(1.0) };
    let d = w * (-t * delta / psi);
    let zeta = gradients.iter().map(|g| g.dot(&d)).fold(f64::NEG_INFINITY, f64::max);
    let decrease = -zeta - 0.5 * d.dot(&(h * &d));
    let bound = if hn == 0.0 { delta } else { delta.min(psi / hn) };
    let required = 0.5 * mu * psi * bound;
    if decrease < required * (1.0 - 1e-10) - 1e-300 {
        return Err(Error::Numerical(format!("modified Cauchy decrease {decrease:e} below {required:e}")));
    }
    Ok((d, zeta))
}

struct Iterate {
    u: DVector<f64>,
    prob: VIProblem,
    sol: VISolution,
    sets: IndexSets,
    f: f64,
    g: DVector<f64>,
    p: DVector<f64>,
}

fn evaluate(
    base: &VIProblem,
    cost: &dyn CostFunction,
    lower: &LowerSolver,
    u: DVector<f64>,
    warm: Option<&VISolution>,
) -> Result<(VIProblem, VISolution, f64)> {
    let prob = base.with_control(u.clone());
    let sol = lower.solve(&prob, warm)?;
    let f = cost.eval(&sol.y, &u);
    Ok((prob, sol, f))
}

fn complete(cost: &dyn CostFunction, u: DVector<f64>, prob: VIProblem, sol: VISolution, f: f64) -> Result<Iterate> {
    let sets = sol.sets(&prob);
    let (g, p) = gradient_from_solution(&prob, cost, &sol, &sets, PartitionPolicy::AllZero)?;
    Ok(Iterate { u, prob, sol, sets, f, g, p })
}

/// Subgradients for every subset `S` of the possibly biactive set `P`:
/// `(K p)_j = 0` on `(A_s \ P) ∪ (B \ P) ∪ S`, `(K p)_j` on the line
/// through `q_j` for `(P ∩ A) \ S`, and the curvature term on `I \ S`.
fn modified_gradients(
    it: &Iterate,
    cost: &dyn CostFunction,
    pset: &[usize],
    sol: &VISolution,
) -> Result<Vec<DVector<f64>>> {
    let prob = &it.prob;
    let gy = cost.grad_y(&sol.y, &prob.u);
    let gu = cost.grad_u(&sol.y, &prob.u);
    let in_p = |j: &usize| pset.contains(j);
    let mut is_active = vec![false; prob.m];
    for &j in &it.sets.active {
        is_active[j] = true;
    }
    let base_zero: Vec<usize> = it.sets.active.iter().filter(|j| !in_p(j)).copied().collect();
    let mut out = Vec::with_capacity(1 << pset.len());
    for mask in 0u64..(1u64 << pset.len()) {
        let chosen: Vec<usize> = pset.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &j)| j).collect();
        let mut zero = base_zero.clone();
        zero.extend(&chosen);
        let line: Vec<usize> =
            pset.iter().filter(|&&j| is_active[j] && !chosen.contains(&j)).copied().collect();
        let inactive: Vec<usize> = it.sets.inactive.iter().filter(|j| !chosen.contains(j)).copied().collect();
        let op = SubspaceOperator::new(prob, sol, &inactive, &zero, &line)?;
        let s = op.apply(&gy);
        out.push(&s.eta + &gu);
    }
    Ok(out)
}

/// Algorithm driver. `prob` supplies `A` and `K`; its control is replaced by `u0`.
pub fn tr_optimize(
    prob: &VIProblem,
    cost: &dyn CostFunction,
    cfg: &TRConfig,
    lower: &LowerSolver,
    u0: &DVector<f64>,
) -> Result<TROutput> {
    cfg.validate()?;
    if u0.len() != prob.n {
        return Err(Error::Dimension(format!("u0 has length {}, expected {}", u0.len(), prob.n)));
    }
    let n = prob.n;
    let ly = match cfg.lipschitz_ly {
        Some(l) => l,
        None => 1.0 / smallest_eigenvalue_spd(&prob.a, 500)?,
    };
    let u0n = if u0.norm() > 0.0 { u0.norm() } else { 1.0 };
    let (p0, s0, f0) = evaluate(prob, cost, lower, u0.clone(), None)?;
    let mut it = complete(cost, u0.clone(), p0, s0, f0)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut delta = cfg.delta0;
    let mut trace = TRTrace::default();
    let mut stop = StopReason::MaxIter;
    let mut iterations = 0;
    for k in 0..cfg.max_iter {
        iterations = k + 1;
        let gnorm = it.g.norm();
        let mut rec = TRRecord {
            iter: k,
            f: it.f,
            grad_norm: gnorm,
            delta,
            delta_next: delta,
            rho: f64::NAN,
            phase: if delta > cfg.delta_min { Phase::Standard } else { Phase::Modified },
            step: StepKind::None,
            psi: None,
            step_norm: 0.0,
            f_trial: it.f,
        };
        if gnorm == 0.0 {
            trace.records.push(rec);
            stop = StopReason::ZeroGradient;
            break;
        }
        let (d, rho, trial) = if rec.phase == Phase::Standard {
            let newton = Some(-(&hinv * &it.g));
            let d = dogleg_with_newton(&it.g, &h, delta, newton, cfg.dogleg_beta, cfg.dogleg_delta);
            let pred = predicted_reduction(&it.g, &h, &d);
            let (tp, ts, tf) = evaluate(prob, cost, lower, &it.u + &d, Some(&it.sol))?;
            let rho = if pred.abs() < 1e-14 { 0.0 } else { (it.f - tf) / pred };
            (d, rho, (tp, ts, tf))
        } else {
            let slack = min_euclidean_slack(&it.prob, &it.sol, &it.sets)?.q;
            let sol_e = it.sol.with_slack(&it.prob, slack);
            let (pset, _) = identify_possible_biactive(&it.prob, &sol_e, delta, ly, cfg.partition_cap_phase2)
                .map_err(|e| match e {
                    Error::PartitionCapExceeded { size, cap, .. } => {
                        Error::PartitionCapExceeded { size, cap, iteration: Some(k) }
                    }
                    e => e,
                })?;
            let grads = modified_gradients(&it, cost, &pset, &sol_e)?;
            let (psi, w) = psi_measure(&grads)?;
            rec.psi = Some(psi);
            if psi <= cfg.psi_tol {
                trace.records.push(rec);
                stop = StopReason::PsiSmall;
                break;
            }
            let hn = symmetric_norm(&h);
            let (d, zeta) = modified_step(&grads, &h, hn, delta, cfg.mu, psi, &w)?;
            let (tp, ts, tf) = evaluate(prob, cost, lower, &it.u + &d, Some(&it.sol))?;
            let pred = -zeta - 0.5 * d.dot(&(&h * &d));
            let rho = if psi <= gnorm * delta || pred.abs() < 1e-14 { 0.0 } else { (it.f - tf) / pred };
            (d, rho, (tp, ts, tf))
        };
        rec.rho = rho;
        rec.step_norm = d.norm();
        rec.f_trial = trial.2;
        let new_delta = cfg.radius_update(rho, delta);
        rec.delta_next = new_delta;
        if rho <= cfg.eta1 {
            rec.step = StepKind::Null;
            trace.records.push(rec);
            delta = new_delta;
            if cfg.stop_rule == StopRule::EveryIteration {
                stop = StopReason::RelativeStep;
                break;
            }
            if delta < f64::EPSILON * it.u.norm().max(u0n) {
                stop = StopReason::RadiusUnderflow;
                break;
            }
            continue;
        }
        rec.step = StepKind::Successful;
        trace.records.push(rec);
        delta = new_delta;
        let (tp, ts, tf) = trial;
        let next = complete(cost, &it.u + &d, tp, ts, tf)?;
        let z = &next.g - &it.g;
        h = bfgs_update(&h, &d, &z);
        bfgs_inverse_update(&mut hinv, &d, &z);
        it = next;
        log::debug!("iter {k}: f = {:.10e}, |g| = {:.3e}, delta = {:.3e}", it.f, it.g.norm(), delta);
        if d.norm() / u0n < cfg.stop_tol {
            stop = StopReason::RelativeStep;
            break;
        }
    }
    let grad_norm = it.g.norm();
    Ok(TROutput { u: it.u, y: it.sol.y.clone(), p: it.p, f: it.f, grad_norm, iterations, stop, trace, solution: it.sol })
}
