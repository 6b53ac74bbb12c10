//! Concatenated local Picard solver for the mean-field FBSDE
//!
//! dy = u(y, p) ds + η dW,  dp = −[∇_y g₁(y, u) + ∇_y g₂(y, 𝕃)] ds + q dW,
//! p(T) = ∇_y h₁(y(T)), with u(y, p) the first-order-condition feedback and
//! 𝕃 the law of y.
//!
//! The horizon is cut into sub-intervals no wider than δ_loc. They are solved
//! from the last to the first: each local problem runs a Picard iteration
//! (forward Euler–Maruyama with the current field, law summaries, backward
//! least-squares regression) against a fixed terminal proxy, which is the
//! already-solved field at the right endpoint. A forward pass from the initial
//! law then refreshes the sub-interval starting states, and sweeps repeat
//! until one leaves the field unchanged.

mod basis;
mod config;
pub(crate) mod engine;
mod field;
pub(crate) mod mfg;
mod regression;

pub use basis::MonomialBasis;
pub use config::{compute_delta_loc, DeltaLoc, SolverConfig};
pub use engine::{PicardRecord, SubintervalRecord};
pub use field::DecouplingField;
pub use regression::{least_squares, regress_field, standardization, EvalBuf, FeatureKind, FieldSlice, COLLAPSE_TRACE, RIDGE};

use std::cell::RefCell;
use std::time::Instant;

use serde::Serialize;

use crate::analysis::cii_margin;
use crate::error::{Error, Result};
use crate::measure::{moments, BrownianDriver, MeasureFlow, ParticleEnsemble};
use crate::model::CostModel;
use engine::{run_sweeps, Engine};
use mfg::MfgSystem;

/// Uniform time grid with its sub-interval boundaries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub horizon: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Step indices of τ₁ < … < τ_n (first 0, last `n_steps`).
    pub boundaries: Vec<usize>,
}

impl TimeGrid {
    /// Grid of round((T − t0)/dt) steps; `dt` must divide the span.
    pub fn new(t0: f64, horizon: f64, dt: f64) -> Result<Self> {
        let span = horizon - t0;
        if !(span > 0.0 && span.is_finite()) {
            return Err(Error::InvalidConfig(format!("empty time interval [{t0}, {horizon}]")));
        }
        let n_steps = (span / dt).round().max(1.0) as usize;
        if ((n_steps as f64) * dt - span).abs() > 1e-9 * span.max(1.0) {
            return Err(Error::InvalidConfig(format!("dt = {dt} does not divide the interval length {span}")));
        }
        Ok(TimeGrid {
            t0,
            horizon,
            dt: span / n_steps as f64,
            n_steps,
            boundaries: vec![0, n_steps],
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.t0 + k as f64 * self.dt
        }
    }

    pub fn boundary_times(&self) -> Vec<f64> {
        self.boundaries.iter().map(|&k| self.time(k)).collect()
    }
}

/// Serializable summary of a diagnostic failure.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub kind: String,
    pub message: String,
    pub t_start: Option<f64>,
    pub t_end: Option<f64>,
}

impl Diagnostic {
    fn from_error(e: &Error) -> Self {
        let (kind, t_start, t_end) = match e {
            Error::NonContraction { t_start, t_end, .. } => ("NonContraction", Some(*t_start), Some(*t_end)),
            Error::NotConverged { t_start, t_end, .. } => ("NotConverged", Some(*t_start), Some(*t_end)),
            Error::SingularSystem { .. } => ("SingularSystem", None, None),
            Error::RiccatiBlowup { .. } => ("RiccatiBlowup", None, None),
            _ => ("Error", None, None),
        };
        Diagnostic {
            kind: kind.into(),
            message: e.to_string(),
            t_start,
            t_end,
        }
    }
}

/// Outcome of a global solve.
#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub sweeps: usize,
    pub grid: TimeGrid,
    pub n_particles: usize,
    pub subintervals: Vec<SubintervalRecord>,
    /// Largest contraction ratio recorded over all sub-intervals and sweeps.
    pub max_ratio: Option<f64>,
    /// max over steps and particles of |p + ∇_v g₁(y, u)| on the final paths.
    pub foc_residual: f64,
    /// max over steps and particles of |p| on the final paths.
    pub max_abs_p: f64,
    pub cii_margin: f64,
    pub warnings: Vec<String>,
    pub diagnostic: Option<Diagnostic>,
    pub wall_time_ms: f64,
    #[serde(skip)]
    pub flow: MeasureFlow,
    #[serde(skip)]
    pub field: DecouplingField,
    /// Step-major paths `[k][i][j]` of the final forward pass.
    #[serde(skip)]
    pub paths: Vec<f64>,
    #[serde(skip)]
    pub init: ParticleEnsemble,
    #[serde(skip)]
    pub config: SolverConfig,
    #[serde(skip)]
    pub failure: Option<Error>,
}

impl SolveReport {
    pub fn dim(&self) -> usize {
        self.init.dim()
    }

    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        let d = self.dim();
        let off = (k * self.n_particles + i) * d;
        &self.paths[off..off + d]
    }

    /// Mean path as (t, mean) pairs.
    pub fn mean_path(&self) -> Vec<(f64, Vec<f64>)> {
        self.flow.grid.iter().zip(&self.flow.summaries).map(|(t, s)| (*t, s.mean.clone())).collect()
    }
}

fn width_rule<'a>(
    constants: &'a crate::model::AssumptionConstants,
    config: &'a SolverConfig,
    dt: f64,
    warnings: &'a RefCell<Vec<String>>,
) -> impl Fn(f64) -> Result<(usize, f64)> + 'a {
    move |c_q| {
        let delta = compute_delta_loc(constants, c_q, config.gamma1)?.value;
        let mut w = warnings.borrow_mut();
        match config.delta_override {
            Some(over) => {
                if over > delta && !w.iter().any(|m| m.starts_with("delta override")) {
                    let msg = format!("delta override {over} exceeds the local contraction width {delta:.3e}");
                    log::warn!("{msg}");
                    w.push(msg);
                }
                Ok((((over / dt) * (1.0 + 1e-12)).floor().max(1.0) as usize, delta))
            }
            None => {
                if delta < dt && !w.iter().any(|m| m.starts_with("local width")) {
                    let msg = format!("local width {delta:.3e} is below dt = {dt}; using one step per sub-interval");
                    log::warn!("{msg}");
                    w.push(msg);
                }
                Ok((((delta / dt) * (1.0 + 1e-12)).floor().max(1.0) as usize, delta))
            }
        }
    }
}

/// Solve on [t0, T] from the initial ensemble. Diagnostic failures
/// (non-contraction, stalled iterations) are returned as errors.
pub fn solve_global<M: CostModel + ?Sized>(
    model: &M,
    init: &ParticleEnsemble,
    t0: f64,
    horizon: f64,
    config: &SolverConfig,
) -> Result<SolveReport> {
    let mut report = solve_global_report(model, init, t0, horizon, config)?;
    match report.failure.take() {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// As [`solve_global`], but diagnostic failures are recorded in the report
/// (`diagnostic`, `failure`) instead of being returned; only input errors
/// produce `Err`.
pub fn solve_global_report<M: CostModel + ?Sized>(
    model: &M,
    init: &ParticleEnsemble,
    t0: f64,
    horizon: f64,
    config: &SolverConfig,
) -> Result<SolveReport> {
    let started = Instant::now();
    config.validate()?;
    model.constants().validate()?;
    let d = model.dim();
    if init.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "initial ensemble".into(),
            expected: d,
            found: init.dim(),
        });
    }
    let mut grid = TimeGrid::new(t0, horizon, config.dt)?;
    let n = init.len();
    let warnings = RefCell::new(Vec::new());
    let margin = cii_margin(model.constants(), horizon - t0);
    if margin <= 0.0 {
        let msg = format!("small mean-field margin {margin:.4e} is not positive on this horizon; contraction is not guaranteed");
        log::warn!("{msg}");
        warnings.borrow_mut().push(msg);
    }
    let sys = MfgSystem {
        model,
        init: init.states(),
        increments: BrownianDriver::new(config.seed, n, grid.n_steps, d, grid.dt).generate(),
        eta: model.diffusion().clone(),
        n,
        d,
        k_steps: grid.n_steps,
        dt: grid.dt,
        t0,
        degree: config.basis_degree,
        terminal_slice: None,
    };
    let mut engine = Engine::new(&sys);
    let rule = width_rule(model.constants(), config, grid.dt, &warnings);
    let outcome = run_sweeps(&mut engine, None, &rule, config.max_picard, config.picard_tol, config.max_sweeps)?;
    drop(rule);
    grid.boundaries = outcome.partition.clone();
    let mut failure = outcome.failure;
    if failure.is_none() && !outcome.converged {
        let last = outcome.records.iter().flat_map(|r| r.sweeps.last()).filter_map(|s| s.distances.first()).copied().fold(0.0, f64::max);
        failure = Some(Error::NotConverged {
            t_start: t0,
            t_end: horizon,
            iterations: outcome.sweeps,
            last_distance: last,
            distances: vec![],
        });
    }
    let flow = build_flow(&engine, &grid, d, config)?;
    let (foc_residual, max_abs_p) = foc_residual(&engine, model, &grid)?;
    let field = DecouplingField {
        times: (0..grid.n_steps).map(|k| grid.time(k)).collect(),
        slices: engine.field.clone(),
    };
    let max_ratio = outcome.records.iter().filter_map(|r| r.max_ratio()).reduce(crate::reduce::nan_max);
    let paths = std::mem::take(&mut engine.paths);
    drop(engine);
    Ok(SolveReport {
        converged: failure.is_none(),
        sweeps: outcome.sweeps,
        n_particles: n,
        subintervals: outcome.records,
        max_ratio,
        foc_residual,
        max_abs_p,
        cii_margin: margin,
        warnings: warnings.into_inner(),
        diagnostic: failure.as_ref().map(Diagnostic::from_error),
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        flow,
        field,
        paths,
        init: init.clone(),
        config: config.clone(),
        failure,
        grid,
    })
}

fn build_flow<S: engine::SweepSystem>(engine: &Engine<'_, S>, grid: &TimeGrid, d: usize, config: &SolverConfig) -> Result<MeasureFlow> {
    let summaries = (0..=grid.n_steps).map(|k| moments(engine.step(k), d)).collect::<Result<Vec<_>>>()?;
    let mut checkpoints = Vec::new();
    for &t in &config.checkpoints {
        let k = (((t - grid.t0) / grid.dt).round().max(0.0) as usize).min(grid.n_steps);
        checkpoints.push((grid.time(k), ParticleEnsemble::new(d, engine.gather(k), format!("checkpoint t={t}"))?));
    }
    Ok(MeasureFlow {
        grid: (0..=grid.n_steps).map(|k| grid.time(k)).collect(),
        summaries,
        checkpoints,
    })
}

fn foc_residual<M: CostModel + ?Sized>(engine: &Engine<'_, MfgSystem<'_, M>>, model: &M, grid: &TimeGrid) -> Result<(f64, f64)> {
    let d = model.dim();
    let n = engine.sys.n;
    let mut worst: f64 = 0.0;
    let mut max_p: f64 = 0.0;
    let mut buf = EvalBuf::default();
    let mut p = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut g = vec![0.0; d];
    for k in 0..grid.n_steps {
        for i in 0..n {
            let y = engine.state(i, k);
            engine.field[k].eval_into(y, y, &mut buf, &mut p);
            model.feedback_into(y, &p, &mut u)?;
            model.grad_v_g1_into(y, &u, &mut g);
            let r = p.iter().zip(&g).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
            worst = worst.max(r);
            max_p = max_p.max(p.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    Ok((worst, max_p))
}

/// Terminal condition of a local problem.
#[derive(Debug, Clone)]
pub enum TerminalProxy {
    /// ∇_y h₁.
    Terminal,
    /// A solved field slice at the right endpoint.
    Slice(FieldSlice),
}

/// Result of [`picard_local_solve`].
#[derive(Debug, Clone)]
pub struct LocalSolution {
    /// Step-major paths `[k][i][j]` of the last forward pass.
    pub paths: Vec<f64>,
    /// Field slices at the steps of the interval (right endpoint excluded).
    pub field: Vec<FieldSlice>,
    pub record: PicardRecord,
}

/// Picard iteration on a single interval [t_start, t_end] from the states
/// `xi`, with a fixed terminal proxy. `input_field` (one slice per step)
/// seeds the iteration; zero otherwise. Non-contraction is returned as an
/// error carrying the recorded distances.
pub fn picard_local_solve<M: CostModel + ?Sized>(
    model: &M,
    xi: &ParticleEnsemble,
    t_start: f64,
    t_end: f64,
    proxy: &TerminalProxy,
    input_field: Option<Vec<FieldSlice>>,
    config: &SolverConfig,
) -> Result<LocalSolution> {
    config.validate()?;
    let d = model.dim();
    if xi.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "local initial states".into(),
            expected: d,
            found: xi.dim(),
        });
    }
    let grid = TimeGrid::new(t_start, t_end, config.dt)?;
    let n = xi.len();
    let sys = MfgSystem {
        model,
        init: xi.states(),
        increments: BrownianDriver::new(config.seed, n, grid.n_steps, d, grid.dt).generate(),
        eta: model.diffusion().clone(),
        n,
        d,
        k_steps: grid.n_steps,
        dt: grid.dt,
        t0: t_start,
        degree: config.basis_degree,
        terminal_slice: match proxy {
            TerminalProxy::Terminal => None,
            TerminalProxy::Slice(s) => Some(s.clone()),
        },
    };
    let mut engine = match input_field {
        Some(f) if f.len() == grid.n_steps => Engine::with_field(&sys, f),
        Some(f) => {
            return Err(Error::DimensionMismatch {
                what: "input field slices".into(),
                expected: grid.n_steps,
                found: f.len(),
            })
        }
        None => Engine::new(&sys),
    };
    engine.forward(0, grid.n_steps, true)?;
    let (record, err) = engine.local_solve(0, grid.n_steps, config.max_picard, config.picard_tol);
    if let Some(e) = err {
        return Err(e);
    }
    let field = engine.field.clone();
    Ok(LocalSolution {
        paths: std::mem::take(&mut engine.paths),
        field,
        record,
    })
}
