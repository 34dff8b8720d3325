//! Lower-level solvers: semismooth Newton on a Huber regularization, an
//! unregularized primal-dual (PDHG) iteration, and the closed-form solution of
//! the separable scalar family.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, CsrMatrix, SpdFactor};
use crate::vi_core::{residuals, VIProblem, VISolution, DEFAULT_EPS_ACTIVE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SSNConfig {
    pub gamma: f64,
    /// Further values of gamma, each solved warm-started from the previous one.
    pub continuation: Vec<f64>,
    pub max_iter: usize,
    /// Stop when |F(y,q)| <= tol_newton (1 + |u|).
    pub tol_newton: f64,
    /// Backtracking factor, used only when a full step blows up the residual.
    pub damping: f64,
}

impl Default for SSNConfig {
    fn default() -> Self {
        SSNConfig { gamma: 1000.0, continuation: vec![], max_iter: 200, tol_newton: 1e-10, damping: 0.5 }
    }
}

impl SSNConfig {
    fn schedule(&self) -> Vec<f64> {
        std::iter::once(self.gamma).chain(self.continuation.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PDHGConfig {
    /// Primal step; `None` picks `1 / |K|`.
    pub tau: Option<f64>,
    /// Dual step; `None` picks `0.99 / (tau |K|^2)`.
    pub sigma: Option<f64>,
    pub max_iter: usize,
    /// Stop when every complementarity residual is below `tol`.
    pub tol: f64,
    /// Residuals are evaluated every `check_every` iterations.
    pub check_every: usize,
}

impl Default for PDHGConfig {
    fn default() -> Self {
        PDHGConfig { tau: None, sigma: None, max_iter: 200_000, tol: 1e-10, check_every: 10 }
    }
}

/// `sign(u) max(|u| - k_rows, 0) / a`.
pub fn solve_vi_oracle_separable(a: f64, k_rows: usize, u: f64) -> f64 {
    u.signum() * (u.abs() - k_rows as f64).max(0.0) / a
}

fn unit_rows(q: &mut DMatrix<f64>) {
    for j in 0..q.nrows() {
        let nrm = q.row(j).norm();
        if nrm > 1.0 {
            q.row_mut(j).scale_mut(1.0 / nrm);
        }
    }
}

struct HuberState {
    f1: DVector<f64>,
    f2: DMatrix<f64>,
    norm: f64,
}

fn huber_residual(prob: &VIProblem, gamma: f64, y: &DVector<f64>, q: &DMatrix<f64>) -> HuberState {
    let f1 = prob.a.mul_vec(y) + prob.apply_kt(q) - &prob.u;
    let w = prob.apply_k(y);
    let mut f2 = DMatrix::zeros(prob.m, prob.d);
    for j in 0..prob.m {
        let mj = (gamma * w.row(j).norm()).max(1.0);
        let r = mj * q.row(j) - gamma * w.row(j);
        f2.set_row(j, &r);
    }
    let norm = (f1.norm_squared() + f2.norm_squared()).sqrt();
    HuberState { f1, f2, norm }
}

/// Semismooth Newton on the primal-dual Huber system
///
/// ```text
/// Ay + K^T q = u,    max(1, gamma |(Ky)_j|) q_j = gamma (Ky)_j,
/// ```
///
/// whose solution is `q_j = H_gamma(Ky)_j`. The reduced Newton matrix uses the
/// symmetrized, clipped coupling term so it stays positive definite. The
/// returned slack is `(Ky)_j / |(Ky)_j|` where `gamma |(Ky)_j| > 1` and
/// `gamma (Ky)_j` elsewhere, and the solution's activity threshold is
/// `1 / gamma` so that set classification reproduces the Huber active set.
pub fn solve_vi_ssn(prob: &VIProblem, cfg: &SSNConfig, y0: Option<&DVector<f64>>) -> Result<VISolution> {
    if !(cfg.gamma > 0.0) || !(cfg.tol_newton > 0.0) || cfg.continuation.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::BadInput("gamma and tol_newton must be positive".into()));
    }
    let (n, m, d) = (prob.n, prob.m, prob.d);
    let mut y = match y0 {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => return Err(Error::Dimension(format!("warm start has length {}, expected {n}", v.len()))),
        None => DVector::zeros(n),
    };
    let scale = 1.0 + prob.u.norm();
    let a_trip = prob.a.triplets();
    let mut total = 0usize;
    let mut gamma = cfg.gamma;
    let mut q = {
        let w = prob.apply_k(&y);
        let mut q = w * gamma;
        unit_rows(&mut q);
        q
    };
    for g in cfg.schedule() {
        gamma = g;
        let mut state = huber_residual(prob, gamma, &y, &q);
        let mut converged = state.norm <= cfg.tol_newton * scale;
        let mut it = 0;
        while !converged && it < cfg.max_iter {
            it += 1;
            let w = prob.apply_k(&y);
            let mut blocks = Vec::with_capacity(m);
            let mut mj_all = vec![0.0; m];
            let mut chi = vec![false; m];
            let mut what = DMatrix::zeros(m, d);
            for j in 0..m {
                let wn = w.row(j).norm();
                let mj = (gamma * wn).max(1.0);
                mj_all[j] = mj;
                chi[j] = gamma * wn > 1.0;
                let c = gamma / mj;
                let mut block = DMatrix::identity(d, d) * c;
                if chi[j] {
                    let wh = w.row(j).transpose() / wn;
                    let qn = q.row(j).norm().max(1.0);
                    let qt = q.row(j).transpose() / qn;
                    let s = (&qt * wh.transpose() + &wh * qt.transpose()) * 0.5;
                    block -= s * c;
                    what.set_row(j, &wh.transpose());
                }
                blocks.push((j, block));
            }
            let mut t = a_trip.clone();
            t.extend(prob.block_gram_triplets(&blocks));
            let h = CsrMatrix::from_triplets(n, n, &t);
            let mut f2s = state.f2.clone();
            for j in 0..m {
                f2s.row_mut(j).scale_mut(1.0 / mj_all[j]);
            }
            let rhs = -&state.f1 + prob.apply_kt(&f2s);
            let dy = SpdFactor::new(&h)?.solve(&rhs);
            let dw = prob.apply_k(&dy);
            let mut dq = DMatrix::zeros(m, d);
            for j in 0..m {
                let dm = if chi[j] { gamma * what.row(j).dot(&dw.row(j)) } else { 0.0 };
                let r = (-state.f2.row(j) - dm * q.row(j) + gamma * dw.row(j)) / mj_all[j];
                dq.set_row(j, &r);
            }
            let mut step = 1.0;
            loop {
                let yn = &y + &dy * step;
                let qn = &q + &dq * step;
                let sn = huber_residual(prob, gamma, &yn, &qn);
                let blown = !sn.norm.is_finite() || sn.norm > 1e2 * state.norm;
                if !blown || step < 1e-8 {
                    y = yn;
                    q = qn;
                    state = sn;
                    break;
                }
                step *= cfg.damping;
            }
            converged = state.norm <= cfg.tol_newton * scale;
        }
        total += it;
        if !converged {
            return Err(Error::NoConvergence { iterations: total, residual: state.norm / scale });
        }
    }
    let w = prob.apply_k(&y);
    let mut qf = DMatrix::zeros(m, d);
    for j in 0..m {
        let wn = w.row(j).norm();
        if gamma * wn > 1.0 {
            qf.set_row(j, &(w.row(j) / wn));
        } else {
            qf.set_row(j, &(w.row(j) * gamma));
        }
    }
    unit_rows(&mut qf);
    let res = residuals(prob, &y, &qf);
    Ok(VISolution { y, q: qf, residuals: res, eps_active: 1.0 / gamma, iterations: total })
}

/// Primal-dual hybrid gradient iteration with extrapolation parameter 1:
///
/// ```text
/// (A + I/tau) y+ = u - K^T q + y / tau
/// q+ = P(q + sigma K (2 y+ - y))
/// ```
///
/// where `P` projects each row onto the unit ball.
pub fn solve_vi_pdhg(prob: &VIProblem, cfg: &PDHGConfig, warm: Option<&VISolution>) -> Result<VISolution> {
    let knorm = {
        let mut t = Vec::new();
        for (i, b) in prob.k.iter().enumerate() {
            for (r, c, v) in b.triplets() {
                t.push((i * prob.m + r, c, v));
            }
        }
        spectral_norm(&CsrMatrix::from_triplets(prob.m * prob.d, prob.n, &t), 1000)
    };
    let tau = cfg.tau.unwrap_or(1.0 / knorm.max(1e-300));
    let sigma = cfg.sigma.unwrap_or(0.99 / (tau * knorm * knorm).max(1e-300));
    if !(tau > 0.0 && sigma > 0.0) || tau * sigma * knorm * knorm >= 1.0 {
        return Err(Error::StepSizeInvalid(format!(
            "tau sigma |K|^2 = {} must lie in (0, 1)",
            tau * sigma * knorm * knorm
        )));
    }
    let n = prob.n;
    let mut shifted = prob.a.triplets();
    shifted.extend((0..n).map(|i| (i, i, 1.0 / tau)));
    let fac = SpdFactor::new(&CsrMatrix::from_triplets(n, n, &shifted))?;
    let (mut y, mut q) = match warm {
        Some(s) => (s.y.clone(), s.q.clone()),
        None => (DVector::zeros(n), DMatrix::zeros(prob.m, prob.d)),
    };
    unit_rows(&mut q);
    let check = cfg.check_every.max(1);
    let mut last = f64::INFINITY;
    for k in 1..=cfg.max_iter {
        let rhs = &prob.u - prob.apply_kt(&q) + &y / tau;
        let yn = fac.solve(&rhs);
        let ext = &yn * 2.0 - &y;
        q += prob.apply_k(&ext) * sigma;
        unit_rows(&mut q);
        y = yn;
        if k % check == 0 || k == cfg.max_iter {
            let r = residuals(prob, &y, &q);
            last = r.max();
            if last <= cfg.tol {
                return Ok(VISolution { y, q, residuals: r, eps_active: DEFAULT_EPS_ACTIVE, iterations: k });
            }
        }
    }
    Err(Error::NoConvergence { iterations: cfg.max_iter, residual: last })
}
