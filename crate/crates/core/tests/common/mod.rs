//! Models and helpers shared by the integration tests.
#![allow(dead_code)]

use mfg_core::lq_oracle::solve_mean_bvp;
use mfg_core::measure::ParticleEnsemble;
use mfg_core::model::{lq_cost_model, InitialLaw, LqModel};
use mfg_core::solver::{solve_global, SolveReport, SolverConfig};

/// Convex scalar benchmark: Q=1, R=2, Q̄=0.1, S=0.5, QT=1, η=0.5, T=1,
/// initial law N(1, 0.5²).
pub fn convex_benchmark() -> LqModel {
    let mut m = LqModel::scalar(1.0, 2.0, 0.1, 0.5, 1.0, 1.0, 0.5);
    m.label = "convex-1d".into();
    m.init = Some(InitialLaw {
        mean: vec![1.0],
        std: 0.5,
    });
    m
}

/// Horizon-free convex model: Q=1, R=1, Q̄=0.5, S=0.5, QT=1.
pub fn cii_star_model(horizon: f64) -> LqModel {
    LqModel::scalar(1.0, 1.0, 0.5, 0.5, 1.0, horizon, 0.5)
}

/// Scalar model whose Riccati solution is P(t) = tanh(T − t).
pub fn tanh_model(horizon: f64) -> LqModel {
    LqModel::scalar(1.0, 1.0, 0.0, 0.0, 0.0, horizon, 0.5)
}

/// Only the control is penalised.
pub fn zero_cost_model(horizon: f64) -> LqModel {
    LqModel::scalar(0.0, 1.0, 0.0, 0.0, 0.0, horizon, 0.5)
}

pub fn init_for(model: &LqModel, n: usize, seed: u64) -> ParticleEnsemble {
    let law = model.init.clone().unwrap_or(InitialLaw {
        mean: vec![1.0; model.dim],
        std: 0.5,
    });
    ParticleEnsemble::gaussian(&law.mean, law.std, n, seed).unwrap()
}

pub fn config(n: usize, dt: f64, seed: u64) -> SolverConfig {
    SolverConfig {
        n_particles: n,
        dt,
        seed,
        ..SolverConfig::default()
    }
}

pub fn solve(model: &LqModel, n: usize, dt: f64, seed: u64) -> SolveReport {
    let cost = lq_cost_model(model).unwrap();
    solve_global(&cost, &init_for(model, n, seed), 0.0, model.horizon, &config(n, dt, seed)).unwrap()
}

/// Largest |mean(t) − ȳ(t)| over the grid, with ȳ(0) the ensemble mean.
pub fn mean_path_error(model: &LqModel, report: &SolveReport) -> f64 {
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
