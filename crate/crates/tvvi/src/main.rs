use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use tvvi::bingham::{
    run_experiment, table1_csv, BinghamConfig, GridSpec, DEFAULT_SUBDIVISIONS, TABLE1_ALPHAS,
};
use tvvi::control_tr::{tr_optimize, LowerSolver, TRConfig};
use tvvi::io::{
    load_problem, read_json, rows_of, vec_of, write_grid_csv, write_json, RunManifest, SolutionRecord, VectorSpec,
};
use tvvi::sensitivity::{
    bouligand_element_apply, clarke_element_apply, directional_derivative, frechet_check, frechet_derivative,
    BiactivePartition, DerivativeResult, DEFAULT_PARTITION_CAP,
};
use tvvi::solvers::{PDHGConfig, SSNConfig};
use tvvi::stationarity::{b_stationarity_residual, default_directions, random_directions, strong_stationarity_check, TrackingCost};
use tvvi::{Error, Result, VIProblem};

#[derive(Parser, Debug, Serialize)]
#[command(name = "tvvi", version, about = "Total-variation VIs: solve, differentiate, check stationarity, optimize")]
struct Cli {
    /// Seed for sampled directions.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Overrides the lower-level solver tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Recorded in the manifest; all computations run on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Serialize)]
enum Cmd {
    /// Solve the VI and write solution.json.
    ViSolve {
        #[command(flatten)]
        input: ProblemArgs,
    },
    /// Directional (or Frechet / Clarke) derivative of the solution map.
    Differentiate {
        #[command(flatten)]
        input: ProblemArgs,
        /// Comma-separated components, or one value broadcast to all.
        #[arg(long, allow_hyphen_values = true)]
        direction: String,
        #[arg(long, value_enum, default_value_t = DerivKind::Directional)]
        kind: DerivKind,
    },
    /// Bouligand subdifferential element for a partition of the biactive set.
    Subdiff {
        #[command(flatten)]
        input: ProblemArgs,
        #[arg(long, allow_hyphen_values = true)]
        direction: String,
        /// Bit mask over the biactive blocks (in index order) sent to B1.
        #[arg(long, default_value_t = 0)]
        b1: u64,
    },
    /// B-stationarity residual and strong-stationarity certificate.
    CheckStationarity {
        #[command(flatten)]
        input: ProblemArgs,
        /// JSON `{y_target, alpha, u_ref}`; vectors may be scalars.
        #[arg(long)]
        cost: PathBuf,
        /// Random unit directions (coordinate directions are added when n <= 64).
        #[arg(long, default_value_t = 128)]
        directions: usize,
        #[arg(long, default_value_t = 1e-8)]
        cert_tol: f64,
    },
    /// Trust-region optimization from the problem's control.
    Optimize {
        #[command(flatten)]
        input: ProblemArgs,
        #[arg(long)]
        cost: PathBuf,
        /// JSON trust-region constants; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Bingham experiments.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCmd,
    },
}

#[derive(Subcommand, Debug, Serialize)]
enum ExperimentCmd {
    /// Iteration counts over a list of Tikhonov weights.
    Table1 {
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Subdivisions per side.
        #[arg(long, default_value_t = DEFAULT_SUBDIVISIONS)]
        grid: usize,
        #[arg(long)]
        include_boundary: bool,
        #[arg(long, value_enum, default_value_t = SolverKind::Ssn)]
        solver: SolverKind,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Serialize)]
struct ProblemArgs {
    /// Problem descriptor `{n, m, d, A_path, K_paths, u}`.
    #[arg(long)]
    problem: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverKind::Pdhg)]
    solver: SolverKind,
    /// Huber parameter for `ssn`.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
enum SolverKind {
    Ssn,
    Pdhg,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
enum DerivKind {
    Directional,
    Frechet,
    Clarke,
}

#[derive(Debug, Deserialize)]
struct CostSpec {
    y_target: VectorSpec,
    alpha: f64,
    #[serde(default = "zero_spec")]
    u_ref: VectorSpec,
}

fn zero_spec() -> VectorSpec {
    VectorSpec::Scalar(0.0)
}

fn lower_solver(kind: SolverKind, gamma: Option<f64>, max_iter: Option<usize>, tol: Option<f64>) -> LowerSolver {
    match kind {
        SolverKind::Ssn => {
            let mut c = SSNConfig::default();
            if let Some(g) = gamma {
                c.gamma = g;
            }
            if let Some(m) = max_iter {
                c.max_iter = m;
            }
            if let Some(t) = tol {
                c.tol_newton = t;
            }
            LowerSolver::Ssn(c)
        }
        SolverKind::Pdhg => {
            let mut c = PDHGConfig::default();
            if let Some(m) = max_iter {
                c.max_iter = m;
            }
            if let Some(t) = tol {
                c.tol = t;
            }
            LowerSolver::Pdhg(c)
        }
    }
}

fn parse_direction(s: &str, n: usize) -> Result<DVector<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::BadInput(format!("bad direction component {t:?}"))))
        .collect::<Result<_>>()?;
    let spec = if vals.len() == 1 { VectorSpec::Scalar(vals[0]) } else { VectorSpec::Values(vals) };
    spec.resolve(n, "direction")
}

fn load_cost(path: &Path, prob: &VIProblem) -> Result<TrackingCost> {
    let c: CostSpec = read_json(path)?;
    if !(c.alpha >= 0.0) {
        return Err(Error::BadInput("alpha must be nonnegative".into()));
    }
    Ok(TrackingCost::new(c.y_target.resolve(prob.n, "y_target")?, c.alpha, c.u_ref.resolve(prob.n, "u_ref")?))
}

fn derivative_json(r: &DerivativeResult) -> serde_json::Value {
    json!({
        "kind": r.kind,
        "eta": vec_of(&r.eta),
        "multiplier": rows_of(&r.multiplier),
        "partition": r.partition,
        "ray_coefficients": r.ray_coefficients,
        "residual": r.residual,
        "certified": r.certified,
    })
}

struct Session {
    out: PathBuf,
    manifest: RunManifest,
}

impl Session {
    fn new(cli: &Cli, command: &str) -> Result<Self> {
        fs::create_dir_all(&cli.out)?;
        let manifest = RunManifest::new(command, serde_json::to_value(cli)?);
        Ok(Session { out: cli.out.clone(), manifest })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(name.to_string());
        self.out.join(name)
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        self.manifest.hash_input(p)
    }
}

fn load_input(s: &mut Session, input: &ProblemArgs) -> Result<VIProblem> {
    let prob = load_problem(&input.problem)?;
    s.input(&input.problem)?;
    Ok(prob)
}

fn run(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let name = match &cli.cmd {
        Cmd::ViSolve { .. } => "vi-solve",
        Cmd::Differentiate { .. } => "differentiate",
        Cmd::Subdiff { .. } => "subdiff",
        Cmd::CheckStationarity { .. } => "check-stationarity",
        Cmd::Optimize { .. } => "optimize",
        Cmd::Experiment { .. } => "experiment table1",
    };
    let mut s = Session::new(cli, name)?;
    match &cli.cmd {
        Cmd::ViSolve { input } => {
            let prob = load_input(&mut s, input)?;
            let sol = lower_solver(input.solver, input.gamma, input.max_iter, cli.tol).solve(&prob, None)?;
            write_json(&s.path("solution.json"), &SolutionRecord::new(&prob, &sol))?;
        }
        Cmd::Differentiate { input, direction, kind } => {
            let prob = load_input(&mut s, input)?;
            let h = parse_direction(direction, prob.n)?;
            let sol = lower_solver(input.solver, input.gamma, input.max_iter, cli.tol).solve(&prob, None)?;
            let sets = sol.sets(&prob);
            let r = match kind {
                DerivKind::Directional => directional_derivative(&prob, &sol, &sets, &h, DEFAULT_PARTITION_CAP)?,
                DerivKind::Clarke => clarke_element_apply(&prob, &sol, &sets, &h)?,
                DerivKind::Frechet => match frechet_check(&prob, &sol, &sets)? {
                    tvvi::sensitivity::FrechetStatus::Differentiable { q, .. } => {
                        frechet_derivative(&prob, &sol.with_slack(&prob, q), &sets, &h)?
                    }
                    tvvi::sensitivity::FrechetStatus::NotDifferentiable { r_bar } => {
                        return Err(Error::BadInput(format!(
                            "solution map is not Frechet differentiable here (min max |q_j|^2 = {r_bar})"
                        )))
                    }
                },
            };
            write_json(&s.path("derivative.json"), &derivative_json(&r))?;
        }
        Cmd::Subdiff { input, direction, b1 } => {
            let prob = load_input(&mut s, input)?;
            let h = parse_direction(direction, prob.n)?;
            let sol = lower_solver(input.solver, input.gamma, input.max_iter, cli.tol).solve(&prob, None)?;
            let sets = sol.sets(&prob);
            if sets.biactive.len() < 64 && *b1 >> sets.biactive.len() != 0 {
                return Err(Error::BadInput(format!("mask {b1} exceeds the {} biactive blocks", sets.biactive.len())));
            }
            let part = BiactivePartition::from_mask(&sets, *b1);
            let r = bouligand_element_apply(&prob, &sol, &sets, &part, &h)?;
            write_json(&s.path("derivative.json"), &derivative_json(&r))?;
        }
        Cmd::CheckStationarity { input, cost, directions, cert_tol } => {
            let prob = load_input(&mut s, input)?;
            s.input(cost)?;
            let c = load_cost(cost, &prob)?;
            let sol = lower_solver(input.solver, input.gamma, input.max_iter, cli.tol).solve(&prob, None)?;
            let mut dirs = if prob.n <= 64 { default_directions(prob.n, cli.seed) } else { vec![] };
            dirs.extend(random_directions(prob.n, *directions, cli.seed));
            let b = b_stationarity_residual(&prob, &sol, &c, &dirs)?;
            let cert = strong_stationarity_check(&prob, &sol, &c, *cert_tol)?;
            let out = json!({
                "b_stationarity_residual": b,
                "directions": dirs.len(),
                "strong_stationarity": {
                    "holds": cert.holds,
                    "residuals": cert.residuals,
                    "skipped_rays": cert.skipped_rays,
                    "p": vec_of(&cert.p),
                    "mu": vec_of(&cert.mu),
                },
            });
            write_json(&s.path("certificate.json"), &out)?;
        }
        Cmd::Optimize { input, cost, config } => {
            let prob = load_input(&mut s, input)?;
            s.input(cost)?;
            let c = load_cost(cost, &prob)?;
            let cfg: TRConfig = match config {
                Some(p) => {
                    s.input(p)?;
                    read_json(p)?
                }
                None => TRConfig::default(),
            };
            let lower = lower_solver(input.solver, input.gamma, input.max_iter, cli.tol);
            let out = tr_optimize(&prob, &c, &cfg, &lower, &prob.u.clone())?;
            fs::write(s.path("trace.csv"), out.trace.to_csv())?;
            let res = json!({
                "u": vec_of(&out.u),
                "y": vec_of(&out.y),
                "p": vec_of(&out.p),
                "f": out.f,
                "grad_norm": out.grad_norm,
                "iterations": out.iterations,
                "stop": out.stop,
                "config": cfg,
            });
            write_json(&s.path("result.json"), &res)?;
        }
        Cmd::Experiment { which: ExperimentCmd::Table1 { alphas, grid, include_boundary, solver, gamma, max_iter, config } } => {
            let tr: TRConfig = match config {
                Some(p) => {
                    s.input(p)?;
                    read_json(p)?
                }
                None => TRConfig::default(),
            };
            let alphas = alphas.clone().unwrap_or_else(|| TABLE1_ALPHAS.to_vec());
            if alphas.is_empty() {
                return Err(Error::BadInput("no alphas given".into()));
            }
            let mut base = BinghamConfig::new(*grid, alphas[0]);
            base.grid = GridSpec { n_sub: *grid, include_boundary: *include_boundary };
            base.tr = tr;
            base.lower_solver = lower_solver(*solver, *gamma, *max_iter, cli.tol);
            let side = base.grid.side();
            let mut rows = Vec::new();
            for &alpha in &alphas {
                let (trace, summary, fields) = run_experiment(&BinghamConfig { alpha, ..base.clone() })?;
                let tag = format!("{alpha:e}");
                fs::write(s.path(&format!("trace_alpha_{tag}.csv")), trace.to_csv())?;
                write_grid_csv(&s.path(&format!("u_alpha_{tag}.csv")), &fields.u, side)?;
                write_grid_csv(&s.path(&format!("y_alpha_{tag}.csv")), &fields.y, side)?;
                write_grid_csv(&s.path(&format!("p_alpha_{tag}.csv")), &fields.p, side)?;
                log::info!("alpha {alpha:e}: {} iterations, f = {}", summary.iterations, summary.final_f);
                rows.push(summary);
            }
            fs::write(s.path("summary.csv"), table1_csv(&rows))?;
        }
    }
    s.manifest.wall_seconds = start.elapsed().as_secs_f64();
    s.manifest.write(&s.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
