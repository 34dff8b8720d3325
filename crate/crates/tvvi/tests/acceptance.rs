//! Acceptance criteria, one line each. Runs as a plain binary (`harness = false`)
//! so every line is printed; exits nonzero if any criterion fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvvi::bingham::{bingham_problem, run_experiment, BinghamConfig, GridSpec, TABLE1_ALPHAS, TABLE1_REFERENCE_ITERATIONS};
use tvvi::control_tr::{psi_measure, tr_optimize, LowerSolver, StepKind, StopReason, TRConfig};
use tvvi::linalg::CsrMatrix;
use tvvi::sensitivity::{
    bouligand_element_apply, difference_quotient, directional_derivative, frechet_check, frechet_derivative,
    linear_representative, BiactivePartition, FrechetStatus, DEFAULT_PARTITION_CAP,
};
use tvvi::solvers::{solve_vi_pdhg, solve_vi_ssn, PDHGConfig, SSNConfig};
use tvvi::stationarity::{b_stationarity_residual, random_directions, strong_stationarity_check, CostFunction, TrackingCost};
use tvvi::{VIProblem, VISolution};

const SEED: u64 = 20240917;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Closed-form solution of the separable family: soft threshold of `u` at `k_rows`, scaled by `1/a`.
fn soft_threshold(a: f64, k_rows: usize, u: f64) -> f64 {
    let k = k_rows as f64;
    if u > k {
        (u - k) / a
    } else if u < -k {
        (u + k) / a
    } else {
        0.0
    }
}

fn sci(v: &[f64], digits: usize) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.digits$e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn tight() -> PDHGConfig {
    PDHGConfig { tol: 1e-12, max_iter: 2_000_000, ..Default::default() }
}

fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let nv = v.norm();
    v / nv
}

fn c1_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut worst_pdhg, mut worst_ssn) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let k = rng.gen_range(1..=3);
        let a = rng.gen_range(0.5..4.0);
        let u = rng.gen_range(-6.0..6.0);
        let prob = VIProblem::scalar_family(a, k, u);
        let exact = soft_threshold(a, k, u);
        let yp = solve_vi_pdhg(&prob, &PDHGConfig::default(), None).map(|s| s.y[0]).unwrap_or(f64::INFINITY);
        let ys = solve_vi_ssn(&prob, &SSNConfig::default(), None).map(|s| s.y[0]).unwrap_or(f64::INFINITY);
        worst_pdhg = worst_pdhg.max((yp - exact).abs());
        worst_ssn = worst_ssn.max((ys - exact).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_pdhg <= 1e-6 && worst_ssn <= 5e-3 && secs < 10.0,
        format!("max |pdhg - oracle| = {worst_pdhg:.2e} (<= 1e-6), max |ssn - oracle| = {worst_ssn:.2e} (<= 5e-3), {secs:.2} s (< 10 s)"),
    )
}

fn c2_directional_limit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    let ts = [1e-2, 1e-3, 1e-4, 1e-5];
    let mut worst_final = 0.0f64;
    let mut monotone = true;
    let mut failures = Vec::new();
    for inst in 0..50 {
        let (prob, h) = if inst < 30 {
            let k = rng.gen_range(1..=3);
            let a = rng.gen_range(0.5..4.0);
            // every third instance sits exactly on a kink
            let u = if inst % 3 == 0 { k as f64 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 } } else { rng.gen_range(-6.0..6.0) };
            (VIProblem::scalar_family(a, k, u), v1(if rng.gen_bool(0.5) { 1.0 } else { -1.0 }))
        } else {
            let (p, _) = bingham_problem(&GridSpec::interior(8), 0.0).unwrap();
            let u = DVector::from_fn(p.n, |_, _| rng.gen_range(0.0..60.0));
            let h = random_unit(p.n, &mut rng) * 10.0;
            (p.with_control(u), h)
        };
        let res = (|| -> tvvi::Result<Vec<f64>> {
            let sol = solve_vi_pdhg(&prob, &tight(), None)?;
            let sets = sol.sets(&prob);
            let dd = directional_derivative(&prob, &sol, &sets, &h, DEFAULT_PARTITION_CAP)?;
            ts.iter()
                .map(|&t| Ok((difference_quotient(&prob, &prob.u, &h, t, 1e-12)? - &dd.eta).norm() / h.norm()))
                .collect()
        })();
        match res {
            Ok(errs) => {
                for w in errs.windows(2) {
                    if w[1] > w[0] + 1e-7 {
                        monotone = false;
                        failures.push(format!("#{inst} {}", sci(&errs, 1)));
                    }
                }
                worst_final = worst_final.max(errs[errs.len() - 1]);
            }
            Err(e) => failures.push(format!("#{inst}: {e}")),
        }
    }
    outcome(
        monotone && worst_final <= 1e-3 && failures.is_empty(),
        format!(
            "50 instances, error nonincreasing in t (slack 1e-7): {monotone}, max error at t=1e-5 = {worst_final:.2e} (<= 1e-3){}",
            if failures.is_empty() { String::new() } else { format!(", failures {failures:?}") }
        ),
    )
}

/// Smallest margin to a kink: min |Ky_j| over I and min 1 - |q_j| over A.
fn complementarity_margin(prob: &VIProblem, sol: &VISolution) -> f64 {
    let w = prob.apply_k(&sol.y);
    let mut margin = f64::INFINITY;
    for j in 0..prob.m {
        let nw = w.row(j).norm();
        if nw > 1e-8 {
            margin = margin.min(nw);
        } else {
            margin = margin.min(1.0 - sol.q.row(j).norm());
        }
    }
    margin
}

fn c3_frechet_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut worst = 0.0f64;
    let mut found = 0;
    let mut issues = Vec::new();
    let mut attempts = 0;
    while found < 50 && attempts < 500 {
        attempts += 1;
        let prob = if found < 30 {
            let k = rng.gen_range(1..=3);
            VIProblem::scalar_family(rng.gen_range(0.5..4.0), k, rng.gen_range(-6.0..6.0))
        } else {
            let (p, _) = bingham_problem(&GridSpec::interior(6), 0.0).unwrap();
            let u = DVector::from_fn(p.n, |_, _| rng.gen_range(0.0..40.0));
            p.with_control(u)
        };
        let sol = solve_vi_pdhg(&prob, &tight(), None).unwrap();
        let sets = sol.sets(&prob);
        // the min-l_inf slack is the most favourable one for strictness
        let status = frechet_check(&prob, &sol, &sets).unwrap();
        let FrechetStatus::Differentiable { q, .. } = status else { continue };
        let sol = sol.with_slack(&prob, q);
        if complementarity_margin(&prob, &sol) < 1e-2 {
            continue;
        }
        found += 1;
        let h = random_unit(prob.n, &mut rng);
        let eta = frechet_derivative(&prob, &sol, &sets, &h).unwrap().eta;
        let t = 1e-4;
        let plus = solve_vi_pdhg(&prob.with_control(&prob.u + &h * t), &tight(), Some(&sol)).unwrap();
        let minus = solve_vi_pdhg(&prob.with_control(&prob.u - &h * t), &tight(), Some(&sol)).unwrap();
        let fd = (plus.y - minus.y) / (2.0 * t);
        let rel = (&fd - &eta).norm() / eta.norm().max(1e-3 * h.norm());
        if rel > 1e-4 {
            issues.push(format!("{rel:.1e}"));
        }
        worst = worst.max(rel);
    }
    outcome(
        found == 50 && worst <= 1e-4,
        format!("{found} strictly complementary points (Differentiable), max relative |FD - S'| = {worst:.2e} (<= 1e-4)"),
    )
}

fn c4_min_linf_detection() -> Outcome {
    let two = VIProblem::scalar_family(1.0, 2, 1.0);
    let incumbent = VISolution::new(&two, DVector::zeros(1), DMatrix::from_column_slice(2, 1, &[1.0, 0.0]));
    let sets = incumbent.sets(&two);
    let two_ok = match frechet_check(&two, &incumbent, &sets) {
        Ok(FrechetStatus::Differentiable { r_bar: Some(r), .. }) => (r - 0.25).abs() <= 1e-5,
        _ => false,
    };
    let one = VIProblem::scalar_family(1.0, 1, 1.0);
    let s1 = VISolution::new(&one, DVector::zeros(1), DMatrix::from_element(1, 1, 1.0));
    let sets1 = s1.sets(&one);
    let (one_ok, r1) = match frechet_check(&one, &s1, &sets1) {
        Ok(FrechetStatus::NotDifferentiable { r_bar }) => ((r_bar - 1.0).abs() <= 1e-6, r_bar),
        _ => (false, f64::NAN),
    };
    let r2 = match frechet_check(&two, &incumbent, &sets) {
        Ok(FrechetStatus::Differentiable { r_bar, .. }) => r_bar.unwrap_or(f64::NAN),
        _ => f64::NAN,
    };
    outcome(
        two_ok && one_ok,
        format!("two-row u=1 from q=(1,0): Differentiable, r_bar = {r2:.7} (0.25 +- 1e-5); scalar u=1: NotDifferentiable, r_bar = {r1:.7} (1 +- 1e-6)"),
    )
}

fn c5_partition_realizability() -> Outcome {
    let (a, k, u, eps) = (1.0, 1, 1.0, 1e-5);
    let prob = VIProblem::scalar_family(a, k, u);
    let sol = VISolution::new(&prob, v1(soft_threshold(a, k, u)), DMatrix::from_element(1, 1, 1.0));
    let sets = sol.sets(&prob);
    let y0 = soft_threshold(a, k, u);
    let plus = (soft_threshold(a, k, u + eps) - y0) / eps;
    let minus = (soft_threshold(a, k, u - eps) - y0) / (-eps);
    let h = v1(1.0);
    let e1 = bouligand_element_apply(&prob, &sol, &sets, &BiactivePartition { b0: vec![], b1: vec![0] }, &h).unwrap();
    let e0 = bouligand_element_apply(&prob, &sol, &sets, &BiactivePartition { b0: vec![0], b1: vec![] }, &h).unwrap();
    let d1 = (e1.eta[0] - plus).abs();
    let d0 = (e0.eta[0] - minus).abs();
    outcome(
        sets.biactive == vec![0] && d1 <= 1e-6 && d0 <= 1e-6 && e1.residual <= 1e-10 && e0.residual <= 1e-10,
        format!(
            "B1 element {:.6} vs +eps quotient {plus:.6}; B0 element {:.6} vs -eps quotient {minus:.6}; residuals {:.1e}, {:.1e} (<= 1e-10)",
            e1.eta[0], e0.eta[0], e1.residual, e0.residual
        ),
    )
}

/// Random `(A, K, y, q)` satisfying the complementarity system exactly, with
/// `nb >= 1` biactive blocks and some strongly active ones.
fn biactive_instance(rng: &mut ChaCha8Rng) -> (VIProblem, VISolution) {
    let n = rng.gen_range(5..=8);
    let m = rng.gen_range(3..=5);
    let d = rng.gen_range(1..=2);
    let b = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
    let kb: Vec<DMatrix<f64>> = (0..d).map(|_| DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))).collect();
    let nzero = rng.gen_range(1..=(m - 1).min((n - 1) / d));
    // y in the kernel of the zero blocks
    let mut rows = Vec::new();
    for j in 0..nzero {
        for blk in &kb {
            rows.push(blk.row(j).clone_owned());
        }
    }
    let kz = DMatrix::from_rows(&rows);
    let svd = kz.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let r = kz.nrows();
    let mut y = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    for i in 0..r {
        let v = vt.row(i).transpose();
        y -= &v * v.dot(&y);
    }
    let mut q = DMatrix::zeros(m, d);
    for j in 0..m {
        let w = DVector::from_fn(d, |c, _| kb[c].row(j).dot(&y.transpose()));
        if j < nzero {
            let dir = random_unit(d, rng);
            // first zero block is biactive, the rest are biactive or strongly active at random
            let radius = if j == 0 || rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.2..0.8) };
            q.set_row(j, &(dir * radius).transpose());
        } else {
            q.set_row(j, &(&w / w.norm()).transpose());
        }
    }
    let mut ktq = DVector::zeros(n);
    for c in 0..d {
        ktq += kb[c].transpose() * q.column(c);
    }
    let u = &a * &y + ktq;
    let to_csr = |m: &DMatrix<f64>| {
        CsrMatrix::from_dense(&(0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect::<Vec<_>>())
    };
    let prob = VIProblem::new(to_csr(&a), kb.iter().map(to_csr).collect(), u).unwrap();
    let sol = VISolution::new(&prob, y, q);
    (prob, sol)
}

fn c6_linear_representative() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 6);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut errors = Vec::new();
    while count < 50 {
        let (prob, sol) = biactive_instance(&mut rng);
        let sets = sol.sets(&prob);
        if sets.biactive.is_empty() {
            continue;
        }
        count += 1;
        let h = random_unit(prob.n, &mut rng);
        match linear_representative(&prob, &sol, &sets, &h, DEFAULT_PARTITION_CAP) {
            Ok((dd, part)) => {
                let el = bouligand_element_apply(&prob, &sol, &sets, &part, &h).unwrap();
                let reference = directional_derivative(&prob, &sol, &sets, &h, DEFAULT_PARTITION_CAP).unwrap();
                worst = worst.max((&el.eta - &reference.eta).norm() / h.norm()).max((&dd.eta - &reference.eta).norm() / h.norm());
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    outcome(
        errors.is_empty() && worst <= 1e-9,
        format!("50 instances with biactive blocks, max |S'_B(partition) h - S'(u;h)| = {worst:.2e} (<= 1e-9){}", if errors.is_empty() { String::new() } else { format!(", errors {errors:?}") }),
    )
}

/// Independent evaluation of `-min_{|d|<=1} max_j <g_j, d>`: accelerated
/// projected gradient on the simplex for `min |G lambda|`, stopped on a
/// certified primal-dual bracket `[-|G lambda|, min(0, max_j <g_j, d>)]`.
fn psi_oracle(g: &[DVector<f64>]) -> (f64, f64) {
    let k = g.len();
    let gm = DMatrix::from_columns(g);
    let gram = gm.transpose() * &gm;
    let lip = gram.symmetric_eigenvalues().max().max(1e-300);
    let mut lam = DVector::from_element(k, 1.0 / k as f64);
    let mut z = lam.clone();
    let mut t = 1.0f64;
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for it in 0..3_000_000 {
        let grad = &gram * &z;
        let next = project_simplex(&(&z - grad / lip));
        let tn = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        z = &next + (&next - &lam) * ((t - 1.0) / tn);
        lam = next;
        t = tn;
        if it % 20 == 0 {
            let w = &gm * &lam;
            let nw = w.norm();
            lo = lo.max(-nw);
            let mut up = 0.0f64;
            if nw > 0.0 {
                let d = -&w / nw;
                up = up.min(g.iter().map(|gj| gj.dot(&d)).fold(f64::NEG_INFINITY, f64::max));
            }
            hi = hi.min(up);
            if hi - lo <= 1e-9 {
                break;
            }
        }
    }
    (-hi, -lo)
}

fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut s: Vec<f64> = v.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in s.iter().enumerate() {
        cum += x;
        let th = (cum - 1.0) / (i as f64 + 1.0);
        if x - th > 0.0 {
            theta = th;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

fn c7_psi_duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let mut worst = 0.0f64;
    let mut widest = 0.0f64;
    let mut zeros = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=8);
        let n = rng.gen_range(1..=20);
        let g: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let (psi, w) = psi_measure(&g).unwrap();
        let (lo, hi) = psi_oracle(&g);
        if hi < 1e-9 {
            zeros += 1;
        }
        widest = widest.max(hi - lo);
        let err = if psi < lo { lo - psi } else if psi > hi { psi - hi } else { 0.0 };
        worst = worst.max(err).max((w.norm() - psi).abs());
    }
    outcome(
        worst <= 1e-6 && widest <= 1e-6,
        format!("100 random sets ({zeros} with psi = 0), max distance of psi to the oracle bracket = {worst:.2e} (<= 1e-6), widest bracket {widest:.1e}"),
    )
}

fn c8_tr_scalar() -> Outcome {
    let alpha = 0.01;
    let f = |u: f64| 0.5 * (soft_threshold(1.0, 1, u) - 1.0).powi(2) + 0.5 * alpha * u * u;
    // grid search with refinement
    let (mut best_u, mut best_f) = (0.0, f64::INFINITY);
    let mut i = -200_000;
    while i <= 200_000 {
        let u = i as f64 * 1e-4;
        if f(u) < best_f {
            best_f = f(u);
            best_u = u;
        }
        i += 1;
    }
    for _ in 0..3 {
        let c = best_u;
        for j in -1000..=1000 {
            let u = c + j as f64 * 1e-7;
            if f(u) < best_f {
                best_f = f(u);
                best_u = u;
            }
        }
    }
    let cost = TrackingCost::new(v1(1.0), alpha, v1(0.0));
    let cfg = TRConfig::default();
    let base = VIProblem::scalar_family(1.0, 1, 0.0);
    let out = match tr_optimize(&base, &cost, &cfg, &LowerSolver::Pdhg(PDHGConfig::default()), &v1(10.0)) {
        Ok(o) => o,
        Err(e) => return outcome(false, format!("tr_optimize failed: {e}")),
    };
    let gap = (f(out.u[0]) - best_f).abs();
    let mut monotone = true;
    let mut radius_ok = true;
    for (i, r) in out.trace.records.iter().enumerate() {
        if r.step == StepKind::Successful && !(r.f_trial < r.f) {
            monotone = false;
        }
        if r.step != StepKind::None {
            let expect = if r.rho <= cfg.eta1 {
                cfg.beta1 * r.delta
            } else if r.rho <= cfg.eta2 {
                cfg.delta_min.max(r.delta)
            } else {
                cfg.delta_min.max(cfg.beta2 * r.delta)
            };
            radius_ok &= r.delta_next == expect;
        }
        if let Some(next) = out.trace.records.get(i + 1) {
            radius_ok &= next.delta == r.delta_next;
        }
    }
    outcome(
        gap <= 1e-4 && out.iterations <= 50 && monotone && radius_ok,
        format!(
            "u* = {:.6} (grid oracle {best_u:.6}), |f - f*| = {gap:.1e} (<= 1e-4), {} iterations (<= 50), successful steps decrease f: {monotone}, radius table exact: {radius_ok}",
            out.u[0], out.iterations
        ),
    )
}

struct SweepRow {
    alpha: f64,
    iterations: usize,
    stop: String,
    initial_f: f64,
    final_f: f64,
    grad_tail: Vec<f64>,
}

fn run_sweep() -> Result<(Vec<SweepRow>, f64), String> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for &alpha in &TABLE1_ALPHAS {
        let cfg = BinghamConfig::new(61, alpha);
        let (trace, s, _) = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let n = trace.records.len();
        let grad_tail = trace.records[n.saturating_sub(6)..].iter().map(|r| r.grad_norm).collect();
        rows.push(SweepRow { alpha, iterations: s.iterations, stop: s.stop_reason, initial_f: s.initial_f, final_f: s.final_f, grad_tail });
    }
    Ok((rows, start.elapsed().as_secs_f64()))
}

fn c9_table1(sweep: &Result<(Vec<SweepRow>, f64), String>) -> Outcome {
    let (rows, secs) = match sweep {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let counts: Vec<usize> = rows.iter().map(|r| r.iterations).collect();
    let stops = rows.iter().all(|r| r.stop == format!("{:?}", StopReason::RelativeStep));
    let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
    let band = counts
        .iter()
        .zip(TABLE1_REFERENCE_ITERATIONS)
        .all(|(&c, r)| 2 * c >= r && c <= 2 * r);
    outcome(
        stops && monotone && band && *secs < 600.0,
        format!(
            "alphas {:?}: iterations {counts:?} vs reference {:?}; relative-step stop: {stops}, nondecreasing: {monotone}, within factor 2: {band}, {secs:.0} s (< 600 s)",
            rows.iter().map(|r| r.alpha).collect::<Vec<_>>(),
            TABLE1_REFERENCE_ITERATIONS
        ),
    )
}

fn c10_cost_anchor(sweep: &Result<(Vec<SweepRow>, f64), String>) -> Outcome {
    let rows = match sweep {
        Ok((r, _)) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let Some(r) = rows.iter().find(|r| r.alpha == 5e-4) else { return outcome(false, "alpha 5e-4 missing".into()) };
    let reference = 1277.104634583353;
    let rel = (r.initial_f - reference).abs() / reference;
    let decreasing = r.grad_tail.len() == 6 && r.grad_tail.windows(2).all(|w| w[1] < w[0]);
    outcome(
        rel <= 0.05 && r.final_f < 840.0 && decreasing,
        format!(
            "initial f = {:.9} (reference 1277.104634583, rel. diff {rel:.1e} <= 5e-2), final f = {:.9} (< 840), last 6 |g| {} strictly decreasing: {decreasing}",
            r.initial_f,
            r.final_f,
            sci(&r.grad_tail, 3)
        ),
    )
}

fn c11_stationarity() -> Outcome {
    let run = || -> tvvi::Result<(f64, f64, f64, f64, usize)> {
        let alpha = 5e-3;
        let grid = GridSpec::interior(61);
        let (prob, _) = bingham_problem(&grid, 10.0)?;
        let n = prob.n;
        let cost = TrackingCost::new(DVector::from_element(n, 1.0), alpha, DVector::zeros(n));
        let u0 = DVector::from_element(n, 10.0);
        let lower = LowerSolver::Ssn(SSNConfig { continuation: vec![1e4, 1e5, 1e6], ..Default::default() });
        let cfg = TRConfig { stop_tol: 1e-7, ..Default::default() };
        let out = tr_optimize(&prob, &cost, &cfg, &lower, &u0)?;
        let p = prob.with_control(out.u.clone());
        let sol = out.solution;
        let dirs = random_directions(n, 128, SEED + 11);
        let b = b_stationarity_residual(&p, &sol, &cost, &dirs)?;
        let cert = strong_stationarity_check(&p, &sol, &cost, 1e-4)?;
        let g0 = cost.grad_u(&sol.y, &u0).norm();
        Ok((b, g0, cert.residuals.gradient_eq, out.grad_norm, out.iterations))
    };
    match run() {
        Ok((b, g0, geq, gn, it)) => outcome(
            b <= 1e-4 * g0 && geq <= 1e-4,
            format!(
                "alpha 5e-3 ({it} iterations, |g| = {gn:.2e}): b-stationarity residual {b:.2e} (<= 1e-4 |grad_u J(u0)| = {:.2e}), gradient-equation residual {geq:.2e} (<= 1e-4)",
                1e-4 * g0
            ),
        ),
        Err(e) => outcome(false, format!("failed: {e}")),
    }
}

fn main() {
    // `cargo test` passes harness flags; a filter that names nothing here skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let heavy = std::thread::spawn(|| {
        let sweep = run_sweep();
        (c9_table1(&sweep), c10_cost_anchor(&sweep))
    });
    let c11 = std::thread::spawn(c11_stationarity);
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "oracle equivalence", c1_oracle_equivalence()),
        (2, "directional derivative limit", c2_directional_limit()),
        (3, "Frechet consistency", c3_frechet_consistency()),
        (4, "min-l_inf slack detection", c4_min_linf_detection()),
        (5, "partition realizability", c5_partition_realizability()),
        (6, "linear representative", c6_linear_representative()),
        (7, "psi duality", c7_psi_duality()),
        (8, "TR on the scalar control problem", c8_tr_scalar()),
    ];
    let (c9, c10) = heavy.join().expect("sweep thread panicked");
    results.push((9, "Bingham weight sweep", c9));
    results.push((10, "cost-trace anchor", c10));
    results.push((11, "stationarity cross-check", c11.join().expect("stationarity thread panicked")));
    let mut failed = 0;
    for (i, name, o) in &results {
        println!("[{}] criterion {i:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
