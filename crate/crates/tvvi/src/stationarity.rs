//! Stationarity diagnostics for `min_u f(u) = J(S(u), u)`: the sampled
//! B-stationarity residual and the strong-stationarity multiplier system.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensitivity::{
    adjoint_solve, polar_defects, second_order_operator, BiactivePartition, ConeGenerators, DirectionalSolver,
    DEFAULT_PARTITION_CAP,
};
use crate::vi_core::{IndexSets, VIProblem, VISolution};

/// Continuously differentiable upper-level objective `J(y, u)`.
pub trait CostFunction: Send + Sync {
    fn eval(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn grad_y(&self, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_u(&self, y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

/// `1/2 |y - y_target|^2 + alpha/2 |u - u_ref|^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingCost {
    pub y_target: DVector<f64>,
    pub alpha: f64,
    pub u_ref: DVector<f64>,
}

impl TrackingCost {
    pub fn new(y_target: DVector<f64>, alpha: f64, u_ref: DVector<f64>) -> Self {
        TrackingCost { y_target, alpha, u_ref }
    }
}

impl CostFunction for TrackingCost {
    fn eval(&self, y: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * (y - &self.y_target).norm_squared() + 0.5 * self.alpha * (u - &self.u_ref).norm_squared()
    }
    fn grad_y(&self, y: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        y - &self.y_target
    }
    fn grad_u(&self, _y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (u - &self.u_ref) * self.alpha
    }
}

/// `J = 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCost;

impl CostFunction for ZeroCost {
    fn eval(&self, _y: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        0.0
    }
    fn grad_y(&self, y: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(y.len())
    }
    fn grad_u(&self, _y: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(u.len())
    }
}

/// Largest relative mismatch between the analytic gradients and central
/// differences of `eval` along `probes` random directions.
pub fn gradient_check(cost: &dyn CostFunction, y: &DVector<f64>, u: &DVector<f64>, probes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gy = cost.grad_y(y, u);
    let gu = cost.grad_u(y, u);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let dy = random_unit(y.len(), &mut rng);
        let du = random_unit(u.len(), &mut rng);
        let t = 1e-5;
        let fd = (cost.eval(&(y + &dy * t), &(u + &du * t)) - cost.eval(&(y - &dy * t), &(u - &du * t))) / (2.0 * t);
        let an = gy.dot(&dy) + gu.dot(&du);
        worst = worst.max((fd - an).abs() / an.abs().max(1.0));
    }
    worst
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        let nrm: f64 = v.norm();
        if nrm > 0.0 {
            return v / nrm;
        }
    }
}

/// `count` random unit vectors from a seeded generator.
pub fn random_directions(n: usize, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_unit(n, &mut rng)).collect()
}

/// `+-e_i` for every coordinate plus 64 random unit vectors.
pub fn default_directions(n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(2 * n + 64);
    for i in 0..n {
        for s in [1.0, -1.0] {
            let mut e = DVector::zeros(n);
            e[i] = s;
            out.push(e);
        }
    }
    out.extend(random_directions(n, 64, seed));
    out
}

/// `f'(u; h) = <grad_y J, S'(u; h)> + <grad_u J, h>` for each direction, normalized to unit length.
pub fn directional_slopes(
    prob: &VIProblem,
    sol: &VISolution,
    sets: &IndexSets,
    cost: &dyn CostFunction,
    directions: &[DVector<f64>],
) -> Result<Vec<f64>> {
    let gy = cost.grad_y(&sol.y, &prob.u);
    let gu = cost.grad_u(&sol.y, &prob.u);
    let ds = DirectionalSolver::new(prob, sol, sets, DEFAULT_PARTITION_CAP)?;
    directions
        .iter()
        .map(|h| {
            let nrm = h.norm();
            if nrm == 0.0 {
                return Ok(0.0);
            }
            let h = h / nrm;
            let eta = ds.derivative(&h)?.eta;
            Ok(gy.dot(&eta) + gu.dot(&h))
        })
        .collect()
}

/// `max(0, -min_h f'(u; h))` over the sampled directions, evaluated at the
/// solution `sol` of the VI with control `prob.u`.
pub fn b_stationarity_residual(
    prob: &VIProblem,
    sol: &VISolution,
    cost: &dyn CostFunction,
    directions: &[DVector<f64>],
) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::BadInput("no directions given".into()));
    }
    let sets = sol.sets(prob);
    let slopes = directional_slopes(prob, sol, &sets, cost, directions)?;
    Ok(slopes.into_iter().fold(0.0f64, |acc, s| acc.max(-s)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StationarityResiduals {
    /// `|L p + mu - grad_y J|`
    pub adjoint_eq: f64,
    /// Largest violation of `p` in the critical cone.
    pub p_cone: f64,
    /// Norm of the lineality-space component of `mu`.
    pub mu_lineality: f64,
    /// `max(0, -min_j <mu, v_j>)` over ray representatives.
    pub mu_rays: f64,
    /// `|p_adj + grad_u J|` with the generalized adjoint (all biactive blocks in `B0`).
    pub gradient_eq: f64,
}

impl StationarityResiduals {
    pub fn max(&self) -> f64 {
        [self.adjoint_eq, self.p_cone, self.mu_lineality, self.mu_rays, self.gradient_eq]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct StrongStationarityCertificate {
    pub p: DVector<f64>,
    pub mu: DVector<f64>,
    pub residuals: StationarityResiduals,
    /// Biactive rays without a representative (skipped).
    pub skipped_rays: Vec<usize>,
    pub holds: bool,
}

/// Multipliers `p = -grad_u J` and `mu = grad_y J - L p`, checked for
/// `p` in the critical cone and `mu` in its polar (through the lineality
/// space and ray representatives).
pub fn strong_stationarity_check(
    prob: &VIProblem,
    sol: &VISolution,
    cost: &dyn CostFunction,
    tol: f64,
) -> Result<StrongStationarityCertificate> {
    let sets = sol.sets(prob);
    let u = &prob.u;
    let gy = cost.grad_y(&sol.y, u);
    let gu = cost.grad_u(&sol.y, u);
    let p = -&gu;
    let l = second_order_operator(prob, &sol.y, &sets.inactive);
    let lp = l.mul_vec(&p);
    let mu = &gy - &lp;
    let adjoint_eq = (&lp + &mu - &gy).norm();
    let kp = prob.apply_k(&p);
    let mut p_cone = 0.0f64;
    for &j in &sets.strongly_active {
        p_cone = p_cone.max(kp.row(j).norm());
    }
    for &j in &sets.biactive {
        let q = sol.q_row(j);
        let w = kp.row(j).transpose();
        p_cone = p_cone.max(w.norm() - q.dot(&w) / q.norm());
    }
    let gen = ConeGenerators::new(prob, sol, &sets)?;
    let (mu_lineality, min_ray) = polar_defects(&gen, &mu);
    let skipped_rays = gen.rays.iter().filter(|(_, v)| v.is_none()).map(|(j, _)| *j).collect();
    let adj = adjoint_solve(prob, sol, &sets, &BiactivePartition::all_zero(&sets), &gy)?;
    let gradient_eq = (&adj.p + &gu).norm();
    let residuals = StationarityResiduals { adjoint_eq, p_cone, mu_lineality, mu_rays: (-min_ray).max(0.0), gradient_eq };
    Ok(StrongStationarityCertificate { p, mu, holds: residuals.max() <= tol, residuals, skipped_rays })
}
