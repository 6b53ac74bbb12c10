//! Sensitivity of a solved equilibrium to its initial condition.
//!
//! Along the frozen base solution (y, p, u) the derivative processes in a
//! direction Ψ solve the linear system
//!
//! dDy = Du ds,  Du = −(∇_vv g₁)⁻¹ (Dp + ∇_vy g₁ Dy),
//! dDp = −[∇_yy g₁ Dy + ∇_yv g₁ Du + ∇_yy g₂ Dy + M E[Dy]] ds + Dq dW,
//! Dp(T) = ∇_yy h₁ Dy(T),  Dy(t₀) = Ψ,
//!
//! with M = ∇_ỹ (d/dν) ∇_y g₂. It is solved on the base partition with the
//! same Picard/regression engine. The field splits as
//! Dp = ∇_y p(y)·Dy + F(y): the first term is read off the base field and
//! only the remainder F, driven by E[Dy], is regressed on the base state.
//! Every step is linear in the data, so the discrete flow is homogeneous
//! in Ψ.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::assumptions::cii_star;
use crate::error::{Error, Result};
use crate::measure::{moments, BrownianDriver};
use crate::model::{AssumptionConstants, CostModel};
use crate::solver::engine::{run_sweeps, Engine, SweepSystem};
use crate::solver::{standardization, EvalBuf, FeatureKind, FieldSlice, MonomialBasis, PicardRecord, SolveReport};

/// Relative slack on the C₂ comparison.
pub const BOUND_SLACK: f64 = 1e-2;

/// Initial perturbation Ψ.
#[derive(Debug, Clone, PartialEq)]
pub enum Direction {
    /// The same vector for every particle.
    Uniform(Vec<f64>),
    /// Particle-major perturbation, one d-vector per particle.
    Ensemble(Vec<f64>),
}

impl Direction {
    fn check(&self, n: usize, d: usize) -> Result<()> {
        let (expected, found) = match self {
            Direction::Uniform(v) => (d, v.len()),
            Direction::Ensemble(v) => (n * d, v.len()),
        };
        if expected != found {
            return Err(Error::DimensionMismatch {
                what: "Jacobian direction".into(),
                expected,
                found,
            });
        }
        Ok(())
    }

    fn at(&self, i: usize, d: usize) -> &[f64] {
        match self {
            Direction::Uniform(v) => v,
            Direction::Ensemble(v) => &v[i * d..(i + 1) * d],
        }
    }

    /// ‖Ψ‖ in L² over the ensemble.
    fn norm(&self, n: usize, d: usize) -> f64 {
        let sum: f64 = (0..n).map(|i| self.at(i, d).iter().map(|x| x * x).sum::<f64>()).sum();
        (sum / n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobianFlowResult {
    pub times: Vec<f64>,
    /// ‖D^Ψp(s)‖ in L² over the ensemble at every grid time.
    pub dp_norms: Vec<f64>,
    pub dy_norms: Vec<f64>,
    pub psi_norm: f64,
    /// C₂‖Ψ‖; `None` outside the horizon-free convex regime.
    pub c2_bound: Option<f64>,
    pub gamma3: Option<f64>,
    pub bound_satisfied: bool,
    pub picard: Vec<Vec<PicardRecord>>,
}

/// γ₃ = 2√(k·C_{g₁}), k = −(λ_{g₁}+λ_{g₂}+c_{g₂}): equalises the two
/// γ₃-dependent entries of the C₂ minimum.
pub fn balanced_gamma3(c: &AssumptionConstants) -> f64 {
    2.0 * (-c.mean_field_deficit() * c.big_c_g1).sqrt()
}

/// Bound on ‖D^Ψp‖ for unit ‖Ψ‖ in the horizon-free regime:
/// C₂ = 1 / min{−λ_{h₁}/C_{h₁}², γ₃/(C_{g₁}B), 4k/(γ₃B)} with
/// B = 2(c_{g₂}+C_{g₂}) + C_{g₁}(1 + (C_{g₁}+1)/Λ). `None` unless λ_{h₁} < 0
/// and k > 0.
pub fn c2_bound(c: &AssumptionConstants, gamma3: f64) -> Option<f64> {
    if !cii_star(c) || !(gamma3 > 0.0) {
        return None;
    }
    let k = -c.mean_field_deficit();
    let b = 2.0 * (c.c_g2 + c.big_c_g2) + c.big_c_g1 * (1.0 + (c.big_c_g1 + 1.0) / c.lambda_big);
    let terminal = if c.big_c_h1 > 0.0 { -c.lambda_h1 / (c.big_c_h1 * c.big_c_h1) } else { f64::INFINITY };
    let running = if c.big_c_g1 > 0.0 { gamma3 / (c.big_c_g1 * b) } else { f64::INFINITY };
    let deficit = 4.0 * k / (gamma3 * b);
    let m = terminal.min(running).min(deficit);
    (m.is_finite() && m > 0.0).then(|| 1.0 / m)
}

/// Linearisation of the base solution at one (step, particle).
struct Base {
    hvv_inv: DMatrix<f64>,
    /// ∇_yv g₁ (rows y, columns v).
    hyv: DMatrix<f64>,
    /// ∇_yy g₁ + ∇_yy g₂.
    hyy: DMatrix<f64>,
    mfield: DMatrix<f64>,
}

struct JacobianSystem<'a, M: CostModel + ?Sized> {
    model: &'a M,
    report: &'a SolveReport,
    psi: &'a Direction,
    increments: Vec<f64>,
    n: usize,
    d: usize,
    k_steps: usize,
    /// Degree of the base-state polynomial fitting the mean-field remainder.
    degree: usize,
    /// One linearisation per step when the model's Hessians are constant.
    bases: Option<Vec<Base>>,
    /// Row-major ∇_y p of the base field: per step when `per_step_slopes`,
    /// else per (step, particle).
    slopes: Vec<f64>,
    per_step_slopes: bool,
}

impl<M: CostModel + ?Sized> JacobianSystem<'_, M> {
    fn base_p(&self, k: usize, y: &[f64]) -> Vec<f64> {
        if k == self.k_steps {
            let mut g = vec![0.0; self.d];
            self.model.grad_h1_into(y, &mut g);
            g
        } else {
            self.report.field.slices[k].eval(y)
        }
    }

    fn linearise(&self, k: usize, i: usize) -> Result<Base> {
        let y = self.report.state(i, k);
        let p = self.base_p(k, y);
        let mut u = vec![0.0; self.d];
        self.model.feedback_into(y, &p, &mut u)?;
        let g1 = self.model.g1(y, &u);
        let g2 = self.model.g2(y, &self.report.flow.summaries[k]);
        Ok(Base {
            hvv_inv: crate::linalg::inverse(&g1.hess_vv, "control Hessian")?,
            hyv: g1.hess_yv,
            hyy: g1.hess_yy + g2.hess_yy,
            mfield: g2.mfield,
        })
    }

    fn with_base<R>(&self, k: usize, i: usize, f: impl FnOnce(&Base) -> R) -> Result<R> {
        match &self.bases {
            Some(b) => Ok(f(&b[k])),
            None => Ok(f(&self.linearise(k, i)?)),
        }
    }

    /// Du = −H_vv⁻¹(Dp + H_vy Dy).
    fn du(base: &Base, dy: &DVector<f64>, dp: &[f64]) -> DVector<f64> {
        let rhs = DVector::from_column_slice(dp) + base.hyv.transpose() * dy;
        -(&base.hvv_inv * rhs)
    }

    fn increment(&self, k: usize, i: usize) -> &[f64] {
        let off = (k * self.n + i) * self.d;
        &self.increments[off..off + self.d]
    }

    fn slope(&self, k: usize, i: usize) -> &[f64] {
        let dd = self.d * self.d;
        let off = if self.per_step_slopes { k * dd } else { (k * self.n + i) * dd };
        &self.slopes[off..off + dd]
    }
}

impl<M: CostModel + ?Sized> SweepSystem for JacobianSystem<'_, M> {
    type Law = Vec<f64>;

    fn n_particles(&self) -> usize {
        self.n
    }

    fn state_dim(&self) -> usize {
        self.d
    }

    fn out_dim(&self) -> usize {
        self.d
    }

    fn n_steps(&self) -> usize {
        self.k_steps
    }

    fn dt(&self) -> f64 {
        self.report.grid.dt
    }

    fn time(&self, k: usize) -> f64 {
        self.report.grid.time(k)
    }

    fn n_controls(&self) -> usize {
        self.d
    }

    fn initial(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.psi.at(i, self.d));
    }

    fn anchor<'b>(&'b self, k: usize, i: usize, _x: &'b [f64]) -> &'b [f64] {
        self.report.state(i, k)
    }

    fn layout(&self, k: usize, _states: &[f64]) -> Result<FieldSlice> {
        let m = &self.report.flow.summaries[k];
        let variances: Vec<f64> = (0..self.d).map(|j| m.covariance[(j, j)]).collect();
        let (center, scale, degree) = standardization(&m.mean, &variances, self.degree);
        let basis = MonomialBasis::new(self.d, degree);
        let coef = DMatrix::zeros(basis.len(), self.d);
        Ok(FieldSlice {
            kind: FeatureKind::Monomial,
            basis,
            center,
            scale,
            linear_dim: 0,
            coef,
        })
    }

    fn controls(&self, k: usize, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.increment(k, i));
    }

    fn forward_step(&self, k: usize, i: usize, x: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let dy = DVector::from_column_slice(x);
        let du = self.with_base(k, i, |b| Self::du(b, &dy, p))?;
        let dt = self.dt();
        for j in 0..self.d {
            out[j] = x[j] + dt * du[j];
        }
        Ok(())
    }

    fn law(&self, _k: usize, states: &[f64]) -> Result<Vec<f64>> {
        Ok(moments(states, self.d)?.mean)
    }

    fn driver(&self, k: usize, i: usize, x: &[f64], p: &[f64], law: &Vec<f64>, out: &mut [f64]) -> Result<()> {
        let dy = DVector::from_column_slice(x);
        let mean = DVector::from_column_slice(law);
        let f = self.with_base(k, i, |b| {
            let du = Self::du(b, &dy, p);
            &b.hyy * &dy + &b.hyv * du + &b.mfield * &mean
        })?;
        out.copy_from_slice(f.as_slice());
        Ok(())
    }

    fn terminal(&self, i: usize, x: &[f64], out: &mut [f64]) -> Result<()> {
        let h = self.model.h1(self.report.state(i, self.k_steps)).hess;
        let v = h * DVector::from_column_slice(x);
        out.copy_from_slice(v.as_slice());
        Ok(())
    }

    fn zero_slice(&self) -> FieldSlice {
        FieldSlice::zero(FeatureKind::Monomial, self.d, 0, self.d)
    }

    /// The individual part ∇_y p(y)·Dy, taken from the base field: with a
    /// uniform Ψ every particle carries the same Dy, so a regression on Dy
    /// could not separate it from the mean-field remainder.
    fn add_known(&self, k: usize, i: usize, x: &[f64], sign: f64, out: &mut [f64]) {
        let g = self.slope(k, i);
        for (c, o) in out.iter_mut().enumerate() {
            *o += sign * (0..self.d).map(|j| g[c * self.d + j] * x[j]).sum::<f64>();
        }
    }
}

fn base_slopes(report: &SolveReport, per_step: bool) -> Vec<f64> {
    let (n, d, k_steps) = (report.n_particles, report.dim(), report.grid.n_steps);
    let mut buf = EvalBuf::default();
    let mut out = Vec::new();
    let mut g = vec![0.0; d * d];
    for k in 0..k_steps {
        let slice = &report.field.slices[k];
        for i in 0..if per_step { 1 } else { n } {
            slice.gradient_into(report.state(i, k), &mut buf, &mut g);
            out.extend_from_slice(&g);
        }
    }
    out
}

/// Solve the derivative system in direction `psi` along a converged solve
/// of `model`. `gamma3` defaults to [`balanced_gamma3`].
pub fn jacobian_flow_solve<M: CostModel + ?Sized>(
    report: &SolveReport,
    model: &M,
    psi: &Direction,
    gamma3: Option<f64>,
) -> Result<JacobianFlowResult> {
    if let Some(e) = &report.failure {
        return Err(Error::InvalidConfig(format!("base solution did not converge: {e}")));
    }
    if !report.converged {
        return Err(Error::InvalidConfig("base solution did not converge".into()));
    }
    let d = model.dim();
    if report.dim() != d {
        return Err(Error::DimensionMismatch {
            what: "base solution".into(),
            expected: d,
            found: report.dim(),
        });
    }
    let n = report.n_particles;
    let k_steps = report.grid.n_steps;
    psi.check(n, d)?;
    let c = model.constants();
    let gamma3 = cii_star(c).then(|| gamma3.unwrap_or_else(|| balanced_gamma3(c)));
    let c2 = gamma3.and_then(|g| c2_bound(c, g));
    let psi_norm = psi.norm(n, d);
    let times: Vec<f64> = (0..=k_steps).map(|k| report.grid.time(k)).collect();
    if psi_norm == 0.0 {
        return Ok(JacobianFlowResult {
            dp_norms: vec![0.0; k_steps + 1],
            dy_norms: vec![0.0; k_steps + 1],
            times,
            psi_norm,
            c2_bound: c2.map(|b| b * psi_norm),
            gamma3,
            bound_satisfied: c2.is_some(),
            picard: Vec::new(),
        });
    }
    let cfg = &report.config;
    // Affine base slices have state-independent slopes.
    let per_step_slopes = cfg.basis_degree <= 1;
    let mut sys = JacobianSystem {
        model,
        report,
        psi,
        increments: BrownianDriver::new(cfg.seed, n, k_steps, d, report.grid.dt).generate(),
        n,
        d,
        k_steps,
        degree: cfg.basis_degree - 1,
        bases: None,
        slopes: base_slopes(report, per_step_slopes),
        per_step_slopes,
    };
    if model.constant_hessians() {
        sys.bases = Some((0..=k_steps).map(|k| sys.linearise(k, 0)).collect::<Result<_>>()?);
    }
    let mut engine = Engine::new(&sys);
    let no_rule = |_: f64| -> Result<(usize, f64)> { unreachable!("partition is supplied") };
    // Scale-free tolerance keeps the iteration count independent of |Ψ|.
    let tol = cfg.picard_tol * psi_norm;
    let outcome = run_sweeps(&mut engine, Some(report.grid.boundaries.clone()), &no_rule, cfg.max_picard, tol, cfg.max_sweeps)?;
    if let Some(e) = outcome.failure {
        return Err(e);
    }
    if !outcome.converged {
        return Err(Error::NotConverged {
            t_start: report.grid.t0,
            t_end: report.grid.horizon,
            iterations: outcome.sweeps,
            last_distance: f64::NAN,
            distances: Vec::new(),
        });
    }
    let mut dp_norms = Vec::with_capacity(k_steps + 1);
    let mut dy_norms = Vec::with_capacity(k_steps + 1);
    let mut buf = EvalBuf::default();
    let mut dp = vec![0.0; d];
    for k in 0..=k_steps {
        let (mut sp, mut sy) = (0.0, 0.0);
        for i in 0..n {
            let dy = engine.state(i, k);
            if k == k_steps {
                sys.terminal(i, dy, &mut dp)?;
            } else {
                engine.field[k].eval_into(report.state(i, k), dy, &mut buf, &mut dp);
                sys.add_known(k, i, dy, 1.0, &mut dp);
            }
            sp += dp.iter().map(|x| x * x).sum::<f64>();
            sy += dy.iter().map(|x| x * x).sum::<f64>();
        }
        dp_norms.push((sp / n as f64).sqrt());
        dy_norms.push((sy / n as f64).sqrt());
    }
    if dp_norms.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Jacobian flow".into()));
    }
    let bound = c2.map(|b| b * psi_norm);
    let bound_satisfied = bound.is_some_and(|b| dp_norms.iter().all(|x| *x <= b * (1.0 + BOUND_SLACK)));
    Ok(JacobianFlowResult {
        times,
        dp_norms,
        dy_norms,
        psi_norm,
        c2_bound: bound,
        gamma3,
        bound_satisfied,
        picard: outcome.records.into_iter().map(|r| r.sweeps).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assumption_constants, LqModel};

    #[test]
    fn c2_for_convex_scalar_model() {
        let m = LqModel::scalar(1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.0);
        let c = assumption_constants(&m).unwrap();
        let g = balanced_gamma3(&c);
        assert!((g - 5f64.sqrt()).abs() < 1e-14);
        // B = 2(0.25 + 0.5) + 1·(1 + 2) = 4.5; both γ₃ entries equal √5/4.5.
        let expected = 4.5 / 5f64.sqrt();
        assert!((c2_bound(&c, g).unwrap() - expected).abs() < 1e-12);
        // Any other γ₃ gives a larger bound.
        assert!(c2_bound(&c, 0.8 * g).unwrap() > expected);
        assert!(c2_bound(&c, 1.25 * g).unwrap() > expected);
    }

    #[test]
    fn no_bound_outside_horizon_free_regime() {
        let m = LqModel::scalar(1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0);
        let c = assumption_constants(&m).unwrap();
        assert_eq!(c2_bound(&c, 1.0), None);
    }
}
