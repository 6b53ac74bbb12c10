use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AssumptionConstants;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub basis_degree: usize,
    pub max_picard: usize,
    pub picard_tol: f64,
    /// Young-inequality weight in the ϑ parameter of δ_loc.
    pub gamma1: f64,
    pub delta_override: Option<f64>,
    pub seed: u64,
    /// Cap on backward-concatenation sweeps.
    pub max_sweeps: usize,
    /// Times at which full ensembles are retained in the flow.
    pub checkpoints: Vec<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            n_particles: 10_000,
            dt: 1e-3,
            basis_degree: 1,
            max_picard: 50,
            // Far below the Monte-Carlo error of any desk-scale ensemble.
            picard_tol: 1e-8,
            gamma1: 1.0,
            delta_override: None,
            seed: 0,
            max_sweeps: 100,
            checkpoints: Vec::new(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.picard_tol.is_finite() && self.picard_tol > 0.0) {
            return bad("picard tolerance must be positive");
        }
        if self.basis_degree < 1 {
            return bad("basis degree must be at least 1");
        }
        if self.n_particles < 2 {
            return bad("at least two particles are required");
        }
        if self.max_picard < 1 || self.max_sweeps < 1 {
            return bad("iteration caps must be positive");
        }
        if !(self.gamma1.is_finite() && self.gamma1 > 0.0) {
            return bad("gamma1 must be positive");
        }
        if let Some(w) = self.delta_override {
            if !(w.is_finite() && w > 0.0) {
                return bad("delta override must be positive");
            }
        }
        Ok(())
    }
}

/// δ_loc with the parameters it was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaLoc {
    pub value: f64,
    pub terms: [f64; 3],
    pub theta: f64,
    pub vartheta: f64,
}

/// Local contraction width for a terminal proxy with Lipschitz bound `c_q`:
/// min{1/ϑ, ln(C²+1)/θ, ln(C²/(264e)·[c_q + B/(2γ₁ϑ)]⁻¹ + 1)/θ} with
/// C = C_{g₁}, B = C_{g₁} + c_{g₂} + C_{g₂} + √2C_{g₁}²/Λ, θ = 4√2C_{g₁}/Λ,
/// ϑ = 4[√2C_{g₁}/Λ + γ₁B].
pub fn compute_delta_loc(c: &AssumptionConstants, c_q: f64, gamma1: f64) -> Result<DeltaLoc> {
    if !(c_q >= 0.0 && c_q.is_finite()) {
        return Err(Error::InvalidConfig(format!("terminal-proxy Lipschitz bound must be non-negative, got {c_q}")));
    }
    let lam = c.lambda_big;
    let cg1 = c.big_c_g1;
    let sq2 = std::f64::consts::SQRT_2;
    let b = cg1 + c.c_g2 + c.big_c_g2 + sq2 * cg1 * cg1 / lam;
    let theta = 4.0 * sq2 * cg1 / lam;
    let vartheta = 4.0 * (sq2 * cg1 / lam + gamma1 * b);
    let inner = cg1 * cg1 / (264.0 * std::f64::consts::E) / (c_q + b / (2.0 * gamma1 * vartheta));
    let terms = [1.0 / vartheta, (cg1 * cg1).ln_1p() / theta, inner.ln_1p() / theta];
    let value = terms.iter().copied().fold(f64::INFINITY, f64::min);
    if !(value.is_finite() && value > 0.0) {
        return Err(Error::NonFinite(format!("local width δ_loc = {value} (degenerate constants)")));
    }
    Ok(DeltaLoc {
        value,
        terms,
        theta,
        vartheta,
    })
}
