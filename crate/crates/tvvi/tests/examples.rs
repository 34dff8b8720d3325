use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvvi::bingham::{bingham_problem, run_experiment, sweep_table1, BinghamConfig, GridSpec};
use tvvi::control_tr::{tr_optimize, LowerSolver, Phase, StopReason, StopRule, TRConfig};
use tvvi::sensitivity::{difference_quotient, linear_representative, DEFAULT_PARTITION_CAP};
use tvvi::solvers::{solve_vi_pdhg, PDHGConfig};
use tvvi::stationarity::{TrackingCost, ZeroCost};
use tvvi::vi_core::{cone_membership, cone_membership_dual, energy, ConeMode, ConeSpec};
use tvvi::VIProblem;

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

#[test]
fn difference_quotients_of_the_scalar_family() {
    let p = VIProblem::scalar_family(1.0, 1, 2.0);
    assert!((difference_quotient(&p, &p.u, &v1(1.0), 1e-6, 1e-12).unwrap()[0] - 1.0).abs() < 1e-4);
    let p = VIProblem::scalar_family(1.0, 1, 1.0);
    assert!(difference_quotient(&p, &p.u, &v1(-1.0), 1e-6, 1e-12).unwrap()[0].abs() < 1e-4);
    assert_eq!(difference_quotient(&p, &p.u, &v1(0.0), 1e-6, 1e-12).unwrap()[0], 0.0);
}

#[test]
fn linear_representative_cases() {
    for (u, h, eta, b1) in [(1.0, 1.0, 1.0, true), (1.0, -1.0, 0.0, false)] {
        let p = VIProblem::scalar_family(1.0, 1, u);
        let sol = solve_vi_pdhg(&p, &PDHGConfig { tol: 1e-12, ..Default::default() }, None).unwrap();
        let sets = sol.sets(&p);
        let (r, part) = linear_representative(&p, &sol, &sets, &v1(h), DEFAULT_PARTITION_CAP).unwrap();
        assert!((r.eta[0] - eta).abs() < 1e-9);
        assert_eq!(part.b1.len() == 1, b1);
    }
    let p = VIProblem::scalar_family(1.0, 1, 2.0);
    let sol = solve_vi_pdhg(&p, &PDHGConfig::default(), None).unwrap();
    let sets = sol.sets(&p);
    let (r, part) = linear_representative(&p, &sol, &sets, &v1(5.0), DEFAULT_PARTITION_CAP).unwrap();
    assert!((r.eta[0] - 5.0).abs() < 1e-8);
    assert!(part.b0.is_empty() && part.b1.is_empty());
}

#[test]
fn solutions_minimize_the_energy() {
    let (p, _) = bingham_problem(&GridSpec::interior(6), 12.0).unwrap();
    let sol = solve_vi_pdhg(&p, &PDHGConfig::default(), None).unwrap();
    let e0 = energy(&p, &sol.y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let v = &sol.y + DVector::from_fn(p.n, |_, _| rng.gen_range(-0.1..0.1));
        assert!(energy(&p, &v).unwrap() >= e0 - 1e-9);
    }
}

#[test]
fn cone_representations_agree() {
    // the scalar kink: critical cone is the half line v >= 0
    let p = VIProblem::scalar_family(1.0, 1, 1.0);
    let sol = solve_vi_pdhg(&p, &PDHGConfig { tol: 1e-12, ..Default::default() }, None).unwrap();
    let sets = sol.sets(&p);
    let spec = ConeSpec::critical_cone(&sol, &sets);
    for v in [-2.0, -0.5, 0.0, 0.3, 2.0] {
        let primal = cone_membership(&spec, &p, &v1(v), 1e-9, ConeMode::Cone).unwrap().member;
        let dual = cone_membership_dual(&p, &sol, &sets, &v1(v), 1e-9);
        assert_eq!(primal, dual, "v = {v}");
        assert_eq!(primal, v >= 0.0);
    }
}

#[test]
fn zero_cost_stops_at_once() {
    let p = VIProblem::scalar_family(1.0, 1, 0.0);
    let out = tr_optimize(&p, &ZeroCost, &TRConfig::default(), &LowerSolver::default(), &v1(3.0)).unwrap();
    assert_eq!(out.stop, StopReason::ZeroGradient);
    assert!(out.iterations <= 1);
    assert_eq!(out.grad_norm, 0.0);
}

#[test]
fn kink_optimum_triggers_the_modified_phase() {
    // two rows, S(u) = max(u - 2, 0) near u = 2; the tracking pull and the
    // regularization balance so that f has a kink minimum at u = 2:
    // left slope alpha (2 - u_ref) = -1, right slope -y_target + alpha (2 - u_ref) = 1
    let p = VIProblem::scalar_family(1.0, 2, 0.0);
    let cost = TrackingCost::new(v1(-2.0), 1.0, v1(3.0));
    let lower = LowerSolver::Pdhg(PDHGConfig { tol: 1e-12, ..Default::default() });
    // a tight step tolerance lets the radius reach delta_min
    let cfg = TRConfig { stop_rule: StopRule::SuccessfulSteps, stop_tol: 1e-12, ..Default::default() };
    let out = tr_optimize(&p, &cost, &cfg, &lower, &v1(5.0)).unwrap();
    assert_eq!(out.stop, StopReason::PsiSmall);
    assert!((out.u[0] - 2.0).abs() < 1e-6, "u = {}", out.u[0]);
    assert!(out.trace.records.iter().any(|r| r.phase == Phase::Modified));
    let psi = out.trace.records.iter().filter_map(|r| r.psi).fold(f64::INFINITY, f64::min);
    assert!(psi < 1e-6, "psi = {psi}");
}

#[test]
fn heavy_regularization_drives_the_control_to_zero() {
    let mut cfg = BinghamConfig::new(9, 1e6);
    // at the optimum f is exact to the last bit and every trial is a null step
    cfg.tr.stop_rule = StopRule::SuccessfulSteps;
    let (_, s, fields) = run_experiment(&cfg).unwrap();
    let n = fields.u.len() as f64;
    assert!(fields.u.amax() < 1e-3 * cfg.u0);
    assert!(fields.y.amax() < 1e-6);
    assert!((s.final_f - 0.5 * n).abs() <= 0.01 * 0.5 * n, "f = {}", s.final_f);
}

#[test]
fn single_weight_sweep_matches_the_run() {
    let cfg = BinghamConfig::new(9, 5e-3);
    let (t1, s1, _) = run_experiment(&cfg).unwrap();
    let rows = sweep_table1(&[5e-3], &cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].1.iterations, s1.iterations);
    assert_eq!(rows[0].1.final_f, s1.final_f);
    assert_eq!(rows[0].0.to_csv(), t1.to_csv());
}
