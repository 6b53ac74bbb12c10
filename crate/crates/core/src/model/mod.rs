//! Cost models and the structural constants extracted from them.
//!
//! [`CostModel`] is the interface the solver and the analyzers consume. The
//! linear-quadratic family ([`LqModel`] / [`LqCost`]) implements it exactly;
//! other models supply analytic derivatives and declare their constants.

mod file;
mod lq;

pub use file::{parse_model, parse_model_str, serialize_model};
pub use lq::{assumption_constants, counterexample_model, lq_cost_model, InitialLaw, LqCost, LqModel};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural constants of a cost model.
///
/// `lambda_big` is the convexity modulus in the control; the `lambda_*`
/// semi-concavity constants are sign-free (a negative value means the term is
/// strictly convex); `c_g2` bounds the measure derivative of `∇_y g₂`; the
/// `big_c_*` constants bound second derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionConstants {
    pub lambda_big: f64,
    pub lambda_g1: f64,
    pub lambda_g2: f64,
    pub lambda_h1: f64,
    pub c_g2: f64,
    pub big_c_g1: f64,
    pub big_c_g2: f64,
    pub big_c_h1: f64,
}

impl AssumptionConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_big,
            self.lambda_g1,
            self.lambda_g2,
            self.lambda_h1,
            self.c_g2,
            self.big_c_g1,
            self.big_c_g2,
            self.big_c_h1,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("assumption constants".into()));
        }
        if self.lambda_big <= 0.0 {
            return Err(Error::InvalidModel(format!(
                "convexity modulus must be positive, got {}",
                self.lambda_big
            )));
        }
        if self.c_g2 < 0.0 || self.big_c_g1 < 0.0 || self.big_c_g2 < 0.0 || self.big_c_h1 < 0.0 {
            return Err(Error::InvalidModel("bound constants must be non-negative".into()));
        }
        Ok(())
    }

    /// λ_{g₁} + λ_{g₂} + c_{g₂}: the combined convexity deficit including the
    /// mean-field sensitivity.
    pub fn mean_field_deficit(&self) -> f64 {
        self.lambda_g1 + self.lambda_g2 + self.c_g2
    }
}

/// Finite-dimensional summary of a population law.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSummary {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub second_moment: f64,
}

impl MeasureSummary {
    pub fn dirac(point: &[f64]) -> Self {
        let d = point.len();
        MeasureSummary {
            mean: point.to_vec(),
            covariance: DMatrix::zeros(d, d),
            second_moment: point.iter().map(|x| x * x).sum(),
        }
    }
}

/// Running cost g₁(y, v) with first and second derivatives.
/// `hess_yv[(a, b)]` is ∂²g₁/∂y_a∂v_b.
#[derive(Debug, Clone)]
pub struct G1Eval {
    pub value: f64,
    pub grad_y: DVector<f64>,
    pub grad_v: DVector<f64>,
    pub hess_yy: DMatrix<f64>,
    pub hess_yv: DMatrix<f64>,
    pub hess_vv: DMatrix<f64>,
}

/// Mean-field running cost g₂(y, 𝕃). `mfield` is ∇_ỹ (d/dν) ∇_y g₂, which
/// the interface assumes independent of ỹ.
#[derive(Debug, Clone)]
pub struct G2Eval {
    pub value: f64,
    pub grad_y: DVector<f64>,
    pub hess_yy: DMatrix<f64>,
    pub mfield: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct H1Eval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// A mean-field-game cost model together with its (constant) diffusion.
///
/// Implementors provide exact derivatives. The `*_into` hooks are called in
/// the solver's inner loops; their defaults route through the full
/// evaluations and may be overridden with allocation-free versions.
pub trait CostModel: Send + Sync {
    fn dim(&self) -> usize;
    /// Diffusion matrix η of dy = v ds + η dW.
    fn diffusion(&self) -> &DMatrix<f64>;
    fn constants(&self) -> &AssumptionConstants;

    fn g1(&self, y: &[f64], v: &[f64]) -> G1Eval;
    fn g2(&self, y: &[f64], law: &MeasureSummary) -> G2Eval;
    fn h1(&self, y: &[f64]) -> H1Eval;
    fn h2(&self, law: &MeasureSummary) -> f64;

    fn grad_v_g1_into(&self, y: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.g1(y, v).grad_v.as_slice());
    }

    fn grad_y_g1_into(&self, y: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.g1(y, v).grad_y.as_slice());
    }

    fn grad_y_g2_into(&self, y: &[f64], law: &MeasureSummary, out: &mut [f64]) {
        out.copy_from_slice(self.g2(y, law).grad_y.as_slice());
    }

    fn grad_h1_into(&self, y: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.h1(y).grad.as_slice());
    }

    /// The feedback u(y, p) solving p + ∇_v g₁(y, u) = 0.
    fn feedback_into(&self, y: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        let v = newton_foc(self, y, p)?;
        out.copy_from_slice(&v);
        Ok(())
    }

    /// Whether `g₂` ignores the law entirely (lets the solver skip moments).
    fn law_independent(&self) -> bool {
        false
    }

    /// Whether every second derivative of g₁, g₂ and h₁ is constant in
    /// (y, v, law), so linearisations can be evaluated once.
    fn constant_hessians(&self) -> bool {
        false
    }
}

const NEWTON_MAX_ITER: usize = 50;

fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Damped Newton iteration on p + ∇_v g₁(y, v) = 0 started from v = 0.
pub fn newton_foc<M: CostModel + ?Sized>(model: &M, y: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    let tol = 1e-12 * (1.0 + euclid(p));
    let mut v = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let residual = |v: &[f64], grad: &mut [f64]| {
        model.grad_v_g1_into(y, v, grad);
        for (g, pi) in grad.iter_mut().zip(p) {
            *g += pi;
        }
        euclid(grad)
    };
    let mut r = residual(&v, &mut grad);
    for _ in 0..NEWTON_MAX_ITER {
        if r <= tol {
            return Ok(v);
        }
        let hess = model.g1(y, &v).hess_vv;
        let rhs = DMatrix::from_column_slice(d, 1, &grad);
        let step = crate::linalg::solve(&hess, &rhs, "control Hessian")?;
        let mut t = 1.0;
        let mut trial = vec![0.0; d];
        let mut trial_grad = vec![0.0; d];
        loop {
            for i in 0..d {
                trial[i] = v[i] - t * step[i];
            }
            let rt = residual(&trial, &mut trial_grad);
            if rt < (1.0 - 1e-4 * t) * r || t < 1e-10 {
                v.copy_from_slice(&trial);
                grad.copy_from_slice(&trial_grad);
                r = rt;
                break;
            }
            t *= 0.5;
        }
    }
    if r <= tol {
        Ok(v)
    } else {
        Err(Error::NewtonFailed {
            iterations: NEWTON_MAX_ITER,
            residual: r,
        })
    }
}

/// Solve the first-order condition p + ∇_v g₁(y, v) = 0 for v.
pub fn solve_foc<M: CostModel + ?Sized>(model: &M, y: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if y.len() != model.dim() || p.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            what: "first-order condition arguments".into(),
            expected: model.dim(),
            found: if y.len() != model.dim() { y.len() } else { p.len() },
        });
    }
    let mut v = vec![0.0; model.dim()];
    model.feedback_into(y, p, &mut v)?;
    Ok(v)
}

/// Hamiltonian H(y, 𝕃, p) = inf_v [g₁(y, v) + g₂(y, 𝕃) + v·p], evaluated at
/// the first-order-condition minimiser.
pub fn hamiltonian<M: CostModel + ?Sized>(model: &M, y: &[f64], law: &MeasureSummary, p: &[f64]) -> Result<f64> {
    let u = solve_foc(model, y, p)?;
    let g1 = model.g1(y, &u).value;
    let g2 = model.g2(y, law).value;
    Ok(g1 + g2 + u.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

/// Largest relative discrepancy between the analytic gradients of a model and
/// central finite differences of its values.
///
/// This is a validation helper for user-supplied models; the solver never
/// differentiates numerically.
pub fn gradient_fd_error<M: CostModel + ?Sized>(
    model: &M,
    y: &[f64],
    v: &[f64],
    law: &MeasureSummary,
    h: f64,
) -> f64 {
    let d = model.dim();
    let rel = |fd: f64, exact: f64| (fd - exact).abs() / exact.abs().max(1.0);
    let g1 = model.g1(y, v);
    let g2 = model.g2(y, law);
    let h1 = model.h1(y);
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let shift = |x: &[f64], s: f64| {
            let mut out = x.to_vec();
            out[i] += s;
            out
        };
        let (yp, ym) = (shift(y, h), shift(y, -h));
        let (vp, vm) = (shift(v, h), shift(v, -h));
        let fd_g1y = (model.g1(&yp, v).value - model.g1(&ym, v).value) / (2.0 * h);
        let fd_g1v = (model.g1(y, &vp).value - model.g1(y, &vm).value) / (2.0 * h);
        let fd_g2y = (model.g2(&yp, law).value - model.g2(&ym, law).value) / (2.0 * h);
        let fd_h1 = (model.h1(&yp).value - model.h1(&ym).value) / (2.0 * h);
        worst = worst
            .max(rel(fd_g1y, g1.grad_y[i]))
            .max(rel(fd_g1v, g1.grad_v[i]))
            .max(rel(fd_g2y, g2.grad_y[i]))
            .max(rel(fd_h1, h1.grad[i]));
    }
    worst
}

/// y ↦ M·y into a caller buffer (column-major traversal, no allocation).
pub(crate) fn matvec_into(m: &DMatrix<f64>, x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, xj) in x.iter().enumerate() {
        if *xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += m[(i, j)] * xj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar model g₁ = ¼v⁴ + ½v² + ½y², no mean field, for the Newton path.
    struct Quartic {
        eta: DMatrix<f64>,
        constants: AssumptionConstants,
    }

    impl Quartic {
        fn new() -> Self {
            Quartic {
                eta: DMatrix::from_element(1, 1, 1.0),
                constants: AssumptionConstants {
                    lambda_big: 1.0,
                    lambda_g1: -1.0,
                    lambda_g2: 0.0,
                    lambda_h1: 0.0,
                    c_g2: 0.0,
                    big_c_g1: 10.0,
                    big_c_g2: 0.0,
                    big_c_h1: 0.0,
                },
            }
        }
    }

    impl CostModel for Quartic {
        fn dim(&self) -> usize {
            1
        }
        fn diffusion(&self) -> &DMatrix<f64> {
            &self.eta
        }
        fn constants(&self) -> &AssumptionConstants {
            &self.constants
        }
        fn g1(&self, y: &[f64], v: &[f64]) -> G1Eval {
            let (y, v) = (y[0], v[0]);
            G1Eval {
                value: 0.25 * v.powi(4) + 0.5 * v * v + 0.5 * y * y,
                grad_y: DVector::from_element(1, y),
                grad_v: DVector::from_element(1, v.powi(3) + v),
                hess_yy: DMatrix::from_element(1, 1, 1.0),
                hess_yv: DMatrix::zeros(1, 1),
                hess_vv: DMatrix::from_element(1, 1, 3.0 * v * v + 1.0),
            }
        }
        fn g2(&self, _y: &[f64], _law: &MeasureSummary) -> G2Eval {
            G2Eval {
                value: 0.0,
                grad_y: DVector::zeros(1),
                hess_yy: DMatrix::zeros(1, 1),
                mfield: DMatrix::zeros(1, 1),
            }
        }
        fn h1(&self, _y: &[f64]) -> H1Eval {
            H1Eval {
                value: 0.0,
                grad: DVector::zeros(1),
                hess: DMatrix::zeros(1, 1),
            }
        }
        fn h2(&self, _law: &MeasureSummary) -> f64 {
            0.0
        }
    }

    #[test]
    fn newton_solves_cubic_foc() {
        let m = Quartic::new();
        let v = solve_foc(&m, &[0.3], &[-2.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let resid = -2.0 + v[0].powi(3) + v[0];
        assert!(resid.abs() <= 1e-12 * 3.0);
    }

    #[test]
    fn zero_adjoint_gives_zero_control() {
        let m = Quartic::new();
        let v = solve_foc(&m, &[5.0], &[0.0]).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn newton_converges_for_large_adjoint() {
        let m = Quartic::new();
        let p = -1e3;
        let v = solve_foc(&m, &[0.0], &[p]).unwrap();
        assert!((p + v[0].powi(3) + v[0]).abs() <= 1e-12 * (1.0 + p.abs()));
    }

    #[test]
    fn hamiltonian_matches_closed_form_for_quartic() {
        let m = Quartic::new();
        // v = 1 minimises ¼v⁴ + ½v² − 2v; value ¼ + ½ − 2.
        let h = hamiltonian(&m, &[0.0], &MeasureSummary::dirac(&[0.0]), &[-2.0]).unwrap();
        assert!((h - (0.25 + 0.5 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn fd_validator_accepts_exact_model() {
        let m = Quartic::new();
        let err = gradient_fd_error(&m, &[0.4], &[-0.7], &MeasureSummary::dirac(&[0.0]), 1e-5);
        assert!(err < 1e-8, "fd error {err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = Quartic::new();
        assert!(matches!(solve_foc(&m, &[0.0, 1.0], &[0.0]), Err(Error::DimensionMismatch { .. })));
    }
}
