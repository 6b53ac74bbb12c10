//! `mfg`: command-line front end for the solver, the LQ oracle and the
//! analyzers.
//!
//! Exit status: 0 on success, 1 on input errors, 2 when the run ends in a
//! diagnostic outcome (non-contraction, singular mean-path system). Reports
//! are written in the diagnostic case too.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use mfg_core::analysis::{
    check_assumptions, hjb_residual, jacobian_flow_solve, monotonicity_check, AssumptionReport, Direction, Lattice, MonotonicityReport,
};
use mfg_core::lq_oracle::{counterexample_report, riccati_solve, solve_mean_bvp, uniform_grid};
use mfg_core::measure::ParticleEnsemble;
use mfg_core::model::{assumption_constants, lq_cost_model, parse_model, InitialLaw, LqCost, LqModel};
use mfg_core::solver::{compute_delta_loc, solve_global_report, DeltaLoc, SolveReport, SolverConfig};
use mfg_core::Error;

#[derive(Debug, Parser)]
#[command(name = "mfg", version, about = "Mean-field-game FBSDE solver and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Solve the equilibrium FBSDE with the concatenated Picard scheme.
    Solve,
    /// Closed-form mean path and Riccati decoupling of an LQ model.
    LqOracle,
    /// Blow-up scan, constants and margins of the built-in counterexample.
    Counterexample,
    /// Assumption margins, monotonicity tests and the local width.
    Check,
    /// Solve, then the Jacobian flow in direction `psi`.
    Jacobian,
    /// Solve, then the HJB residual on a space–time lattice (d = 1).
    Hjb,
}

#[derive(Debug, clap::Args)]
struct Opts {
    /// Model file (`key = value` lines).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "mfg-out")]
    out: PathBuf,
    /// Terminal time; defaults to the model's horizon.
    #[arg(long, global = true)]
    horizon: Option<f64>,
    /// Number of particles [default: 10000].
    #[arg(long, global = true)]
    particles: Option<usize>,
    /// Uniform time step; must divide the horizon [default: 0.001].
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Seed of the initial law and the Brownian increments [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Polynomial degree of the regression basis [default: 1].
    #[arg(long = "basis-degree", global = true)]
    basis_degree: Option<usize>,
    /// Picard iteration cap per sub-interval [default: 50].
    #[arg(long = "max-picard", global = true)]
    max_picard: Option<usize>,
    /// Sup-norm Picard tolerance [default: 1e-8].
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Sub-interval width used instead of the computed local width.
    #[arg(long = "delta-override", global = true)]
    delta_override: Option<f64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra parameters as KEY=VALUE (repeatable): gamma1, max_sweeps,
    /// checkpoints, psi, n_paths, value_seed, x_min, dx, nx, t_min,
    /// lattice_dt, nt.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Fully resolved run description.
#[derive(Debug, Clone)]
struct RunConfig {
    command: Command,
    model_path: Option<PathBuf>,
    output_dir: PathBuf,
    horizon: Option<f64>,
    solver: SolverConfig,
    overrides: BTreeMap<String, String>,
}

const OVERRIDE_KEYS: [&str; 12] = [
    "gamma1",
    "max_sweeps",
    "checkpoints",
    "psi",
    "n_paths",
    "value_seed",
    "x_min",
    "dx",
    "nx",
    "t_min",
    "lattice_dt",
    "nt",
];

/// Input problem: reported with usage text, exit 1.
#[derive(Debug)]
struct InputError(String);

impl From<Error> for InputError {
    fn from(e: Error) -> Self {
        InputError(e.to_string())
    }
}

impl From<std::io::Error> for InputError {
    fn from(e: std::io::Error) -> Self {
        InputError(e.to_string())
    }
}

impl From<serde_json::Error> for InputError {
    fn from(e: serde_json::Error) -> Self {
        InputError(e.to_string())
    }
}

enum Outcome {
    Success,
    Diagnostic(String),
}

type RunResult = Result<Outcome, InputError>;

fn parse_number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, InputError> {
    value.trim().parse().map_err(|_| InputError(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>, InputError> {
    value.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_number(key, s)).collect()
}

impl RunConfig {
    fn from_cli(cli: Cli) -> Result<Self, InputError> {
        let o = cli.opts;
        let mut solver = SolverConfig::default();
        if let Some(v) = o.particles {
            solver.n_particles = v;
        }
        if let Some(v) = o.dt {
            solver.dt = v;
        }
        if let Some(v) = o.seed {
            solver.seed = v;
        }
        if let Some(v) = o.basis_degree {
            solver.basis_degree = v;
        }
        if let Some(v) = o.max_picard {
            solver.max_picard = v;
        }
        if let Some(v) = o.tol {
            solver.picard_tol = v;
        }
        solver.delta_override = o.delta_override;
        let mut overrides = BTreeMap::new();
        for item in &o.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| InputError(format!("--set expects KEY=VALUE, got `{item}`")))?;
            let k = k.trim();
            if !OVERRIDE_KEYS.contains(&k) {
                return Err(InputError(format!("unknown --set key `{k}` (known: {})", OVERRIDE_KEYS.join(", "))));
            }
            overrides.insert(k.to_string(), v.trim().to_string());
        }
        if let Some(v) = overrides.get("gamma1") {
            solver.gamma1 = parse_number("gamma1", v)?;
        }
        if let Some(v) = overrides.get("max_sweeps") {
            solver.max_sweeps = parse_number("max_sweeps", v)?;
        }
        if let Some(v) = overrides.get("checkpoints") {
            solver.checkpoints = parse_list("checkpoints", v)?;
        }
        if let Some(h) = o.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(InputError(format!("horizon must be positive, got {h}")));
            }
        }
        solver.validate()?;
        if o.threads == Some(0) {
            return Err(InputError("--threads must be positive".into()));
        }
        if let Some(p) = o.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(p)
                .build_global()
                .map_err(|e| InputError(format!("thread pool: {e}")))?;
        }
        Ok(RunConfig {
            command: cli.command,
            model_path: o.model,
            output_dir: o.out,
            horizon: o.horizon,
            solver,
            overrides,
        })
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, InputError> {
        match self.overrides.get(key) {
            Some(v) => parse_number(key, v),
            None => Ok(default),
        }
    }

    fn load_model(&self) -> Result<LqModel, InputError> {
        let path = self
            .model_path
            .as_ref()
            .ok_or_else(|| InputError("this command requires --model PATH".into()))?;
        let mut model = parse_model(path).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        if let Some(h) = self.horizon {
            model = model.with_horizon(h);
        }
        Ok(model)
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), InputError> {
        fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(name);
        fs::write(&path, contents).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), InputError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, &text)
    }
}

fn initial_law(model: &LqModel) -> InitialLaw {
    model.init.clone().unwrap_or(InitialLaw {
        mean: vec![0.0; model.dim],
        std: 1.0,
    })
}

/// Solve and write trajectory.csv, field.csv and report.json.
fn solve_and_write(run: &RunConfig, model: &LqModel) -> Result<(LqCost, SolveReport), InputError> {
    let cost = lq_cost_model(model)?;
    let law = initial_law(model);
    let init = ParticleEnsemble::gaussian(&law.mean, law.std, run.solver.n_particles, run.solver.seed)?;
    let report = solve_global_report(&cost, &init, 0.0, model.horizon, &run.solver)?;
    run.write("trajectory.csv", &report.flow.to_csv())?;
    run.write("field.csv", &report.field.to_csv())?;
    // Wall time goes to stdout only: output files must not depend on the run.
    let mut json = serde_json::to_value(&report)?;
    if let Some(obj) = json.as_object_mut() {
        obj.remove("wall_time_ms");
    }
    run.write_json("report.json", &json)?;
    println!("solve took {:.0} ms", report.wall_time_ms);
    Ok((cost, report))
}

fn diagnostic_of(report: &SolveReport) -> Option<String> {
    report.diagnostic.as_ref().map(|d| format!("{}: {}", d.kind, d.message))
}

fn cmd_solve(run: &RunConfig) -> RunResult {
    let model = run.load_model()?;
    let (_, report) = solve_and_write(run, &model)?;
    if let Some(msg) = diagnostic_of(&report) {
        return Ok(Outcome::Diagnostic(msg));
    }
    println!(
        "converged in {} sweep(s), {} sub-interval(s), max ratio {}",
        report.sweeps,
        report.subintervals.len(),
        report.max_ratio.map_or("n/a".to_string(), |r| format!("{r:.3e}"))
    );
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct OracleReport {
    horizon: f64,
    ybar0: Vec<f64>,
    pbar0: Option<Vec<f64>>,
    riccati_p0: Option<Vec<f64>>,
    diagnostic: Option<String>,
}

fn cmd_lq_oracle(run: &RunConfig) -> RunResult {
    let model = run.load_model()?;
    let ybar0 = initial_law(&model).mean;
    let steps = (model.horizon / run.solver.dt).round().max(1.0) as usize;
    let mut report = OracleReport {
        horizon: model.horizon,
        ybar0: ybar0.clone(),
        pbar0: None,
        riccati_p0: None,
        diagnostic: None,
    };
    let mut failures = Vec::new();
    match solve_mean_bvp(&model, &ybar0) {
        Ok(path) => {
            let d = model.dim;
            let mut csv = String::from("s");
            for j in 1..=d {
                let _ = write!(csv, ",ybar_{j}");
            }
            for j in 1..=d {
                let _ = write!(csv, ",pbar_{j}");
            }
            csv.push('\n');
            for (s, y, p) in path.sample(steps + 1)? {
                let _ = write!(csv, "{s:.16e}");
                for x in y.iter().chain(p.iter()) {
                    let _ = write!(csv, ",{x:.16e}");
                }
                csv.push('\n');
            }
            run.write("mean_path.csv", &csv)?;
            report.pbar0 = Some(path.pbar0.iter().copied().collect());
        }
        Err(e) if e.is_diagnostic() => failures.push(e.to_string()),
        Err(e) => return Err(e.into()),
    }
    match riccati_solve(&model, &uniform_grid(model.horizon, steps)) {
        Ok(sol) => {
            let mut csv = String::from("t");
            for a in 1..=model.dim {
                for b in 1..=model.dim {
                    let _ = write!(csv, ",p_{a}{b}");
                }
            }
            csv.push('\n');
            for (t, p) in sol.grid.iter().zip(&sol.p) {
                let _ = write!(csv, "{t:.16e}");
                for a in 0..model.dim {
                    for b in 0..model.dim {
                        let _ = write!(csv, ",{:.16e}", p[(a, b)]);
                    }
                }
                csv.push('\n');
            }
            run.write("riccati.csv", &csv)?;
            report.riccati_p0 = Some(sol.p[0].transpose().iter().copied().collect());
        }
        Err(e) if e.is_diagnostic() => failures.push(e.to_string()),
        Err(e) => return Err(e.into()),
    }
    if !failures.is_empty() {
        report.diagnostic = Some(failures.join("; "));
    }
    run.write_json("oracle.json", &report)?;
    match report.diagnostic {
        Some(msg) => Ok(Outcome::Diagnostic(msg)),
        None => Ok(Outcome::Success),
    }
}

fn cmd_counterexample(run: &RunConfig) -> RunResult {
    let report = counterexample_report()?;
    run.write_json("counterexample.json", &report)?;
    run.write("det.csv", &report.blowup.det_csv())?;
    match &report.blowup.root {
        Some(r) => println!("det Φ₂₂ changes sign at T₀ ≈ {:.10} (bracket [{:.10}, {:.10}])", r.t0, r.bracket[0], r.bracket[1]),
        None => println!("no sign change of det Φ₂₂ on the scanned interval"),
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct CheckReport {
    assumptions: AssumptionReport,
    monotonicity: MonotonicityReport,
    /// Local width with the terminal Lipschitz bound C_{h₁} as proxy bound.
    delta_loc: DeltaLoc,
}

fn cmd_check(run: &RunConfig) -> RunResult {
    let model = run.load_model()?;
    let constants = assumption_constants(&model)?;
    let report = CheckReport {
        assumptions: check_assumptions(&model, model.horizon)?,
        monotonicity: monotonicity_check(&model)?,
        delta_loc: compute_delta_loc(&constants, constants.big_c_h1, run.solver.gamma1)?,
    };
    run.write_json("check.json", &report)?;
    let a = &report.assumptions;
    println!("ci_margin  {:.6e}", a.ci_margin);
    println!("cii_margin {:.6e}", a.cii_margin);
    println!("cii_star   {}", a.cii_star);
    println!("Lasry-Lions monotone   {} (least eigenvalue {:.6e})", report.monotonicity.llm_holds, report.monotonicity.llm_min_eig);
    println!("displacement monotone  {} (least eigenvalue {:.6e})", report.monotonicity.dm_holds, report.monotonicity.dm_min_eig);
    Ok(Outcome::Success)
}

fn cmd_jacobian(run: &RunConfig) -> RunResult {
    let model = run.load_model()?;
    let psi = match run.overrides.get("psi") {
        Some(v) => parse_list("psi", v)?,
        None => vec![1.0; model.dim],
    };
    if psi.len() != model.dim {
        return Err(InputError(format!("psi has {} entries, model dimension is {}", psi.len(), model.dim)));
    }
    let (cost, report) = solve_and_write(run, &model)?;
    if let Some(msg) = diagnostic_of(&report) {
        return Ok(Outcome::Diagnostic(msg));
    }
    let result = match jacobian_flow_solve(&report, &cost, &Direction::Uniform(psi), None) {
        Ok(r) => r,
        Err(e) if e.is_diagnostic() => return Ok(Outcome::Diagnostic(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut csv = String::from("t,dp_norm,dy_norm\n");
    for ((t, p), y) in result.times.iter().zip(&result.dp_norms).zip(&result.dy_norms) {
        let _ = writeln!(csv, "{t:.16e},{p:.16e},{y:.16e}");
    }
    run.write("jacobian.csv", &csv)?;
    run.write_json("jacobian.json", &result)?;
    println!(
        "‖D^Ψp(0)‖ = {:.6e}, bound {}",
        result.dp_norms[0],
        result.c2_bound.map_or("n/a".to_string(), |b| format!("{b:.6e} (satisfied: {})", result.bound_satisfied))
    );
    Ok(Outcome::Success)
}

fn cmd_hjb(run: &RunConfig) -> RunResult {
    let model = run.load_model()?;
    if model.dim != 1 {
        return Err(InputError(format!("hjb requires a one-dimensional model, got dimension {}", model.dim)));
    }
    let t_end = model.horizon;
    // Lattice times default to solver steps so no node is rounded.
    let step = run.get("lattice_dt", run.solver.dt)?;
    let lattice = Lattice {
        x_min: run.get("x_min", 0.5)?,
        dx: run.get("dx", 0.05)?,
        nx: run.get("nx", 21)?,
        t_min: run.get("t_min", 0.0)?,
        dt: step,
        nt: run.get("nt", ((0.5 * t_end / step).round() as usize).max(3))?,
    };
    let n_paths = run.get("n_paths", 400)?;
    let value_seed = run.get("value_seed", run.solver.seed)?;
    let (cost, report) = solve_and_write(run, &model)?;
    if let Some(msg) = diagnostic_of(&report) {
        return Ok(Outcome::Diagnostic(msg));
    }
    let res = hjb_residual(&cost, &report.flow, &lattice, &report.field, n_paths, value_seed)?;
    run.write("hjb.csv", &res.to_csv())?;
    #[derive(Serialize)]
    struct Summary {
        lattice: Lattice,
        n_paths: usize,
        max_abs_residual: f64,
    }
    run.write_json(
        "hjb.json",
        &Summary {
            lattice,
            n_paths,
            max_abs_residual: res.max_abs,
        },
    )?;
    println!("max interior |HJB residual| = {:.6e}", res.max_abs);
    Ok(Outcome::Success)
}

fn run(config: &RunConfig) -> RunResult {
    match config.command {
        Command::Solve => cmd_solve(config),
        Command::LqOracle => cmd_lq_oracle(config),
        Command::Counterexample => cmd_counterexample(config),
        Command::Check => cmd_check(config),
        Command::Jacobian => cmd_jacobian(config),
        Command::Hjb => cmd_hjb(config),
    }
}

fn usage_hint() -> &'static str {
    "usage: mfg <solve|lq-oracle|counterexample|check|jacobian|hjb> [--model PATH] [--out DIR] [options]; see `mfg --help`"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MFG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = RunConfig::from_cli(cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Diagnostic(msg)) => {
            eprintln!("diagnostic: {msg}");
            ExitCode::from(2)
        }
        Err(InputError(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", usage_hint());
            ExitCode::from(1)
        }
    }
}
