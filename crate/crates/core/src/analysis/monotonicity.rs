//! Lasry–Lions and displacement monotonicity tests.
//!
//! For costs whose second derivatives are constant (the LQ family) both
//! quadratic forms reduce to eigenvalue tests. With M = ∇_ỹ (d/dν) ∇_y g₂
//! and A = Schur(g₁) + ∇_yy g₂, the Lasry–Lions (LLM) form is
//! ⟨M E[Y], E[Y]⟩ and the displacement (DM) form is
//! E⟨A V, V⟩ + ⟨M E[V], E[V]⟩. The first is non-negative for every Y iff
//! sym(M) ⪰ 0. The second, minimised over V with E|V|² = 1, equals
//! min(λ_min(A), λ_min(A + sym M)): centred V see only A, constant V see
//! A + sym M, and the two parts are orthogonal.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::Result;
use crate::linalg::{inverse, min_sym_eigenvalue, symmetrize};
use crate::measure::StreamKey;
use crate::model::{lq_cost_model, CostModel, LqModel, MeasureSummary};

/// Verdict threshold on least eigenvalues.
pub const MONOTONE_TOL: f64 = -1e-12;
/// Random test fields in the sampled check.
pub const SAMPLED_DIRECTIONS: usize = 100;
/// Support points of each sampled test field.
const SAMPLE_POINTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub llm_min_eig: f64,
    pub dm_min_eig: f64,
    pub llm_holds: bool,
    pub dm_holds: bool,
    /// Smallest normalised LLM / DM form over the random test fields.
    pub llm_sampled_min: f64,
    pub dm_sampled_min: f64,
    /// Sampled signs agree with both verdicts.
    pub sampled_agree: bool,
}

/// ∇_yy g₁ − ∇_vy g₁ (∇_vv g₁)⁻¹ ∇_yv g₁ at (y, v).
pub fn schur_g1<M: CostModel + ?Sized>(model: &M, y: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
    let g = model.g1(y, v);
    let hvv_inv = inverse(&g.hess_vv, "control Hessian")?;
    Ok(&g.hess_yy - &g.hess_yv * hvv_inv * g.hess_yv.transpose())
}

/// Matrix tests at (y, v = 0, law) plus the sampled spot-check.
pub fn monotonicity_at<M: CostModel + ?Sized>(model: &M, y: &[f64], law: &MeasureSummary, seed: u64) -> Result<MonotonicityReport> {
    let d = model.dim();
    let g2 = model.g2(y, law);
    let a = symmetrize(&(schur_g1(model, y, &vec![0.0; d])? + &g2.hess_yy));
    let m = symmetrize(&g2.mfield);
    let llm_min_eig = min_sym_eigenvalue(&m)?;
    let dm_min_eig = min_sym_eigenvalue(&a)?.min(min_sym_eigenvalue(&(&a + &m))?);
    let (llm_sampled_min, dm_sampled_min) = sampled_forms(&a, &m, seed);
    let llm_holds = llm_min_eig >= MONOTONE_TOL;
    let dm_holds = dm_min_eig >= MONOTONE_TOL;
    let sampled_agree = (llm_sampled_min >= MONOTONE_TOL) == llm_holds && (dm_sampled_min >= MONOTONE_TOL) == dm_holds;
    Ok(MonotonicityReport {
        llm_min_eig,
        dm_min_eig,
        llm_holds,
        dm_holds,
        llm_sampled_min,
        dm_sampled_min,
        sampled_agree,
    })
}

/// Both tests for an LQ game (the forms do not depend on the base point).
pub fn monotonicity_check(model: &LqModel) -> Result<MonotonicityReport> {
    let cost = lq_cost_model(model)?;
    let origin = vec![0.0; model.dim];
    monotonicity_at(&cost, &origin, &MeasureSummary::dirac(&origin), 0)
}

/// Minimum normalised LLM and DM forms over random empirical test fields.
/// Field j has a random mean and a spread growing with j, so both the
/// constant and the centred parts of the DM form are exercised.
fn sampled_forms(a: &DMatrix<f64>, m: &DMatrix<f64>, seed: u64) -> (f64, f64) {
    let d = a.nrows();
    let key = StreamKey::new(seed, StreamKey::MONOTONICITY);
    let quad = |mat: &DMatrix<f64>, x: &[f64]| -> f64 {
        (0..d).map(|i| (0..d).map(|j| x[i] * mat[(i, j)] * x[j]).sum::<f64>()).sum()
    };
    let mut llm = f64::INFINITY;
    let mut dm = f64::INFINITY;
    let mut draws = vec![0.0; d * (SAMPLE_POINTS + 1)];
    for dir in 0..SAMPLED_DIRECTIONS {
        key.normals_sequential(dir as u64, &mut draws);
        let spread = dir as f64 / SAMPLED_DIRECTIONS as f64;
        let (center, noise) = draws.split_at(d);
        let points: Vec<Vec<f64>> = noise.chunks(d).map(|e| center.iter().zip(e).map(|(c, z)| c + spread * z).collect()).collect();
        let n = points.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let norm2 = points.iter().map(|p| p.iter().map(|x| x * x).sum::<f64>()).sum::<f64>() / n;
        let mean_form = quad(m, &mean);
        let mean2: f64 = mean.iter().map(|x| x * x).sum();
        if mean2 > 0.0 {
            llm = llm.min(mean_form / mean2);
        }
        let local = points.iter().map(|p| quad(a, p)).sum::<f64>() / n;
        dm = dm.min((local + mean_form) / norm2);
    }
    (llm, dm)
}
