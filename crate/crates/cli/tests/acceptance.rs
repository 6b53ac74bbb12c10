//! Acceptance suite. Prints one PASS/FAIL line per criterion; tolerances are
//! pinned as constants below. A criterion listed in `KNOWN_CONFLICTS` may
//! fail, but only in the single documented way checked by its
//! `known_conflict` flag; anything else fails the test.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mfg_core::analysis::{
    balanced_gamma3, c2_bound, check_assumptions, jacobian_flow_solve, monotonicity_check, value_function, Direction,
    BOUND_SLACK,
};
use mfg_core::lq_oracle::{counterexample_report, riccati_solve, solve_mean_bvp, uniform_grid};
use mfg_core::measure::ParticleEnsemble;
use mfg_core::model::{assumption_constants, counterexample_model, lq_cost_model, InitialLaw, LqModel};
use mfg_core::solver::{compute_delta_loc, picard_local_solve, solve_global, SolveReport, SolverConfig, TerminalProxy};
use mfg_core::Error;

const DET_REL_TOL: f64 = 1e-3;
const DET_AT_0_10: f64 = 0.10336;
const DET_AT_0_11: f64 = -0.042878;
const COUNTEREXAMPLE_SECONDS: f64 = 1.0;
const SIG_FIGS: i32 = 4;
const MARGIN_TOL: f64 = 2e-5;
const CI_MARGIN_AT_0_11: f64 = 0.000994;
const CII_MARGIN_AT_0_10: f64 = -0.00255;
const ORACLE_TOL: f64 = 0.02;
const BENCH_PARTICLES: usize = 10_000;
const BENCH_DT: f64 = 1e-3;
const BENCH_SEED: u64 = 42;
const BENCH_SECONDS: f64 = 60.0;
/// Coarse member of the trend pair: a quarter of the particles, twice dt.
const TREND_PARTICLES: usize = 2_500;
const TREND_DT: f64 = 2e-3;
const TREND_RATIO: [f64; 2] = [1.5, 2.5];
const GRADIENT_TOL: f64 = 1e-2;
const GRADIENT_PATHS: usize = 1_000;
const TANH_TOL: f64 = 0.01;
const TANH_P0: f64 = 0.761594;
const LIFESPAN: f64 = 0.0894;
const LIFESPAN_TOL: f64 = 1e-3;

/// Criteria allowed to report FAIL, each for one documented reason.
const KNOWN_CONFLICTS: &[u32] = &[4];

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    known_conflict: bool,
    detail: String,
}

impl Verdict {
    fn new(id: u32, name: &'static str, pass: bool, detail: String) -> Self {
        Verdict {
            id,
            name,
            pass,
            known_conflict: false,
            detail,
        }
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn convex_benchmark() -> LqModel {
    let mut m = LqModel::scalar(1.0, 2.0, 0.1, 0.5, 1.0, 1.0, 0.5);
    m.label = "convex-1d".into();
    m.init = Some(InitialLaw {
        mean: vec![1.0],
        std: 0.5,
    });
    m
}

fn cii_star_model(horizon: f64) -> LqModel {
    LqModel::scalar(1.0, 1.0, 0.5, 0.5, 1.0, horizon, 0.5)
}

fn tanh_model(horizon: f64) -> LqModel {
    LqModel::scalar(1.0, 1.0, 0.0, 0.0, 0.0, horizon, 0.5)
}

fn config(n: usize, dt: f64, seed: u64) -> SolverConfig {
    SolverConfig {
        n_particles: n,
        dt,
        seed,
        ..SolverConfig::default()
    }
}

fn init_for(model: &LqModel, n: usize, seed: u64) -> ParticleEnsemble {
    let law = model.init.clone().unwrap_or(InitialLaw {
        mean: vec![1.0; model.dim],
        std: 0.5,
    });
    ParticleEnsemble::gaussian(&law.mean, law.std, n, seed).unwrap()
}

fn solve(model: &LqModel, n: usize, dt: f64, seed: u64) -> SolveReport {
    let cost = lq_cost_model(model).unwrap();
    solve_global(&cost, &init_for(model, n, seed), 0.0, model.horizon, &config(n, dt, seed)).unwrap()
}

/// Sup over the grid of |ensemble mean − oracle mean|, oracle started at the
/// ensemble's own initial mean.
fn mean_path_error(model: &LqModel, report: &SolveReport) -> f64 {
    let oracle = solve_mean_bvp(model, &report.flow.summaries[0].mean).unwrap();
    report
        .mean_path()
        .iter()
        .map(|(t, m)| {
            let (y, _) = oracle.at(*t).unwrap();
            m.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn rel_err(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}

fn same_sig_figs(got: f64, want: f64, figs: i32) -> bool {
    let scale = 10f64.powi(want.abs().log10().floor() as i32 - figs + 1);
    (got - want).abs() <= 0.5 * scale
}

fn c1_counterexample() -> Verdict {
    let started = Instant::now();
    let rep = counterexample_report().unwrap();
    let secs = started.elapsed().as_secs_f64();
    let root = rep.blowup.root.as_ref().map(|r| r.t0);
    let bracketed = root.is_some_and(|t| 0.1 < t && t < 0.11);
    let pass = rel_err(rep.det_at_0_10, DET_AT_0_10) <= DET_REL_TOL
        && rel_err(rep.det_at_0_11, DET_AT_0_11) <= DET_REL_TOL
        && bracketed
        && secs < COUNTEREXAMPLE_SECONDS;
    Verdict::new(
        1,
        "counterexample determinants",
        pass,
        format!(
            "det(0.10) = {:.6}, det(0.11) = {:.7}, T0 = {root:?}, {secs:.3} s",
            rep.det_at_0_10, rep.det_at_0_11
        ),
    )
}

fn c2_constants() -> Verdict {
    let c = assumption_constants(&counterexample_model(0.1)).unwrap();
    // The constants are stored as −λ_min for the cost blocks.
    let checks = [
        ("lambda_R", c.lambda_big, 0.010137),
        ("lambda_Q", -c.lambda_g1, -0.41956),
        ("lambda_Qbar", -c.lambda_g2, -1.0916),
        ("c_g2", c.c_g2, 1.027),
    ];
    let pass = checks.iter().all(|(_, got, want)| same_sig_figs(*got, *want, SIG_FIGS));
    let detail = checks.iter().map(|(n, g, _)| format!("{n} = {g:.6}")).collect::<Vec<_>>().join(", ");
    Verdict::new(2, "assumption constants", pass, detail)
}

fn c3_margins() -> Verdict {
    let model = counterexample_model(0.1);
    let ci = check_assumptions(&model, 0.11).unwrap().ci_margin;
    let cii = check_assumptions(&model, 0.1).unwrap().cii_margin;
    let pass = (ci - CI_MARGIN_AT_0_11).abs() <= MARGIN_TOL && (cii - CII_MARGIN_AT_0_10).abs() <= MARGIN_TOL;
    Verdict::new(3, "margins", pass, format!("ci_margin(0.11) = {ci:.6e}, cii_margin(0.10) = {cii:.6e}"))
}

/// The convex benchmark's mean-field block −Q̄S = −0.05 is negative definite,
/// so Lasry–Lions monotonicity cannot hold for it; displacement monotonicity
/// does. That single sub-check is the documented conflict.
fn c4_monotonicity() -> Verdict {
    let ce = monotonicity_check(&counterexample_model(0.1)).unwrap();
    let cv = monotonicity_check(&convex_benchmark()).unwrap();
    let ce_ok = !ce.llm_holds && !ce.dm_holds && ce.sampled_agree;
    let convex_dm_ok = cv.dm_holds && cv.sampled_agree;
    let pass = ce_ok && convex_dm_ok && cv.llm_holds;
    let mut v = Verdict::new(
        4,
        "monotonicity",
        pass,
        format!(
            "counterexample llm {:.4} dm {:.4}; convex llm {:.4} dm {:.4}",
            ce.llm_min_eig, ce.dm_min_eig, cv.llm_min_eig, cv.dm_min_eig
        ),
    );
    v.known_conflict = ce_ok && convex_dm_ok && !cv.llm_holds && (cv.llm_min_eig + 0.05).abs() < 1e-12;
    v
}

fn c5_oracle(bench: &SolveReport, secs: f64) -> Verdict {
    let model = convex_benchmark();
    let err = mean_path_error(&model, bench);
    let ric = riccati_solve(&model, &uniform_grid(model.horizon, 1000)).unwrap();
    let slope = bench.field.slope(0, &[1.0])[(0, 0)];
    let p0 = ric.p[0][(0, 0)];
    let coarse = solve(&model, TREND_PARTICLES, TREND_DT, BENCH_SEED);
    let coarse_err = mean_path_error(&model, &coarse);
    let ratio = coarse_err / err;
    let pass = err <= ORACLE_TOL
        && (slope - p0).abs() <= ORACLE_TOL
        && (TREND_RATIO[0]..=TREND_RATIO[1]).contains(&ratio)
        && secs < BENCH_SECONDS;
    Verdict::new(
        5,
        "oracle equivalence",
        pass,
        format!(
            "mean sup error {err:.3e}, slope {slope:.5} vs P(0) {p0:.5}, trend ratio {ratio:.2} ({coarse_err:.3e} → {err:.3e}), {secs:.1} s"
        ),
    )
}

/// Picard on the last sub-interval of width δ_loc (terminal proxy ∇h₁), and on
/// a width-0.1 interval of the benchmark where more iterations are visible.
fn c6_contraction() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    let mut check = |label: &str, model: &LqModel, width: f64, dt: f64, tol: f64, min_iters: usize| {
        let cost = lq_cost_model(model).unwrap();
        let mut cfg = config(2000, dt, 3);
        cfg.picard_tol = tol;
        let t = model.horizon;
        let sol = picard_local_solve(&cost, &init_for(model, 2000, 3), t - width, t, &TerminalProxy::Terminal, None, &cfg);
        let ok = match &sol {
            Ok(s) => {
                let d = &s.record.distances;
                let head = &d[..d.len().min(5)];
                s.record.ratios.iter().all(|r| *r < 1.0)
                    && head.windows(2).all(|w| w[1] < w[0])
                    && d.len() >= min_iters
                    && s.record.converged
            }
            Err(_) => false,
        };
        pass &= ok;
        notes.push(format!(
            "{label} w={width:.2e}: {}",
            sol.map_or_else(|e| e.to_string(), |s| format!("{} it, max ratio {:.2e}", s.record.iterations, s.record.ratios.iter().copied().fold(0.0, f64::max)))
        ));
    };
    for (label, model) in [("convex-1d", convex_benchmark()), ("cii-star", cii_star_model(1.0)), ("tanh", tanh_model(1.0))] {
        let c = assumption_constants(&model).unwrap();
        let width = compute_delta_loc(&c, c.big_c_h1, 1.0).unwrap().value;
        check(label, &model, width, width / 4.0, 1e-14, 2);
    }
    check("convex-1d", &convex_benchmark(), 0.1, 0.01, 1e-13, 5);

    let model = counterexample_model(0.12);
    let cost = lq_cost_model(&model).unwrap();
    let mut cfg = config(2000, 0.01, 7);
    cfg.delta_override = Some(0.12);
    let blew = matches!(
        picard_local_solve(&cost, &init_for(&model, 2000, 7), 0.0, 0.12, &TerminalProxy::Terminal, None, &cfg),
        Err(Error::NonContraction { .. })
    );
    pass &= blew;
    notes.push(format!("counterexample T=0.12 NonContraction: {blew}"));
    Verdict::new(6, "contraction", pass, notes.join("; "))
}

fn c7_gradient(bench: &SolveReport) -> Verdict {
    let model = convex_benchmark();
    let cost = lq_cost_model(&model).unwrap();
    let mut worst: f64 = 0.0;
    let mut pass = true;
    let points = [0.5, 1.0, 1.5].iter().flat_map(|x| [0.0, 0.25, 0.5].map(|t| (*x, t))).chain([(1.0, 0.75)]);
    for (x, t) in points {
        let v = value_function(&cost, &bench.flow, &bench.field, &[x], t, GRADIENT_PATHS, 17).unwrap();
        let p = bench.field.eval(bench.field.index_of(t), &[x])[0];
        let scaled = (v.grad_fd[0] - p).abs() / (1.0 + p.abs());
        worst = worst.max(scaled);
        pass &= scaled <= GRADIENT_TOL;
    }
    Verdict::new(7, "gradient identity", pass, format!("10 points, worst |grad − p|/(1+|p|) = {worst:.3e}"))
}

fn c8_jacobian() -> Verdict {
    let model = cii_star_model(1.0);
    let cost = lq_cost_model(&model).unwrap();
    let report = solve(&model, 1000, 0.01, 5);
    let res = jacobian_flow_solve(&report, &cost, &Direction::Uniform(vec![1.0]), None).unwrap();
    let c = assumption_constants(&model).unwrap();
    let bound = c2_bound(&c, balanced_gamma3(&c)).unwrap();
    let peak = res.dp_norms.iter().copied().fold(0.0, f64::max);
    let bound_ok = res.dp_norms.iter().all(|p| *p <= bound * (1.0 + BOUND_SLACK));

    let tanh = tanh_model(1.0);
    let report = solve(&tanh, 1000, 2e-3, 3);
    let res = jacobian_flow_solve(&report, &lq_cost_model(&tanh).unwrap(), &Direction::Uniform(vec![1.0]), None).unwrap();
    let dp0 = res.dp_norms[0];
    let pass = bound_ok && (dp0 - TANH_P0).abs() <= TANH_TOL;
    Verdict::new(8, "Jacobian bound", pass, format!("max ‖Dp‖ {peak:.4} ≤ C2 {bound:.4}; tanh ‖Dp(0)‖ = {dp0:.5}"))
}

fn c9_lifespan() -> Verdict {
    let rep = counterexample_report().unwrap();
    let life = rep.lifespan.unwrap_or(f64::NAN);
    let t0 = rep.blowup.root.as_ref().map_or(f64::NAN, |r| r.t0);
    let pass = (life - LIFESPAN).abs() <= LIFESPAN_TOL && life < t0 && 0.1 < t0 && t0 < 0.11;
    Verdict::new(9, "lifespan", pass, format!("lifespan {life:.5} < T0 {t0:.5}"))
}

fn run_cli(out: &Path, threads: usize) -> bool {
    let model = repo_root().join("models/convex-1d.model");
    Command::new(env!("CARGO_BIN_EXE_mfg"))
        .arg("solve")
        .arg("--model")
        .arg(model)
        .args(["--particles", &BENCH_PARTICLES.to_string(), "--dt", &BENCH_DT.to_string()])
        .args(["--seed", &BENCH_SEED.to_string(), "--threads", &threads.to_string()])
        .arg("--out")
        .arg(out)
        .output()
        .is_ok_and(|o| o.status.success())
}

fn c10_determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("t1"), dir.path().join("t2"));
    if !(run_cli(&a, 1) && run_cli(&b, 2)) {
        return Verdict::new(10, "determinism", false, "CLI run failed".into());
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = std::fs::read_dir(&b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    let identical = names == other && names.iter().all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap());
    let listed = names.iter().map(|n| n.to_string_lossy().into_owned()).collect::<Vec<_>>().join(", ");
    Verdict::new(10, "determinism", identical, format!("--threads 1 vs 2, files [{listed}] byte-identical: {identical}"))
}

// Runs without the libtest harness so the verdict lines are never captured.
fn main() {
    let mut verdicts = vec![c1_counterexample(), c2_constants(), c3_margins(), c4_monotonicity()];

    let started = Instant::now();
    let bench = solve(&convex_benchmark(), BENCH_PARTICLES, BENCH_DT, BENCH_SEED);
    let secs = started.elapsed().as_secs_f64();
    verdicts.push(c5_oracle(&bench, secs));
    verdicts.push(c6_contraction());
    verdicts.push(c7_gradient(&bench));
    drop(bench);
    verdicts.push(c8_jacobian());
    verdicts.push(c9_lifespan());
    verdicts.push(c10_determinism());

    for v in &verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && v.known_conflict { " [known conflict]" } else { "" };
        println!("{tag} {:>2} {}: {}{note}", v.id, v.name, v.detail);
    }
    let unexpected: Vec<u32> = verdicts
        .iter()
        .filter(|v| !v.pass && !(v.known_conflict && KNOWN_CONFLICTS.contains(&v.id)))
        .map(|v| v.id)
        .collect();
    if !unexpected.is_empty() {
        eprintln!("criteria failed: {unexpected:?}");
        std::process::exit(1);
    }
}
