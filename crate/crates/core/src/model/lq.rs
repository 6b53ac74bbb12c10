use nalgebra::{DMatrix, DVector};

use super::{matvec_into, AssumptionConstants, CostModel, G1Eval, G2Eval, H1Eval, MeasureSummary};
use crate::error::{Error, Result};
use crate::linalg::{inverse, min_sym_eigenvalue, operator_norm, symmetrize};

/// Gaussian initial law N(mean, std²·I), optionally carried by a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Linear-quadratic mean-field game:
/// g₁ = ½y·Qy + ½v·Rv, g₂ = ½(y − S·m)·Q̄(y − S·m) with m the population
/// mean, h₁ = ½y·Q_T y, h₂ = 0, and dynamics dy = v ds + η dW.
#[derive(Debug, Clone, PartialEq)]
pub struct LqModel {
    pub dim: usize,
    pub horizon: f64,
    pub eta: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub qbar: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub qt: DMatrix<f64>,
    pub label: String,
    pub init: Option<InitialLaw>,
}

impl LqModel {
    /// Scalar model with η = `eta`; convenient for the one-dimensional oracles.
    pub fn scalar(q: f64, r: f64, qbar: f64, s: f64, qt: f64, horizon: f64, eta: f64) -> Self {
        let m = |x: f64| DMatrix::from_element(1, 1, x);
        LqModel {
            dim: 1,
            horizon,
            eta: m(eta),
            q: m(q),
            r: m(r),
            qbar: m(qbar),
            s: m(s),
            qt: m(qt),
            label: String::new(),
            init: None,
        }
    }

    /// Copy with a different horizon.
    pub fn with_horizon(&self, horizon: f64) -> Self {
        LqModel {
            horizon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_keyed().map_err(|(_, msg)| Error::InvalidModel(msg))
    }

    /// Validation that also names the offending field (used by the parser
    /// to attach line numbers).
    pub(crate) fn validate_keyed(&self) -> std::result::Result<(), (&'static str, String)> {
        let d = self.dim;
        if d == 0 {
            return Err(("dim", "dimension must be positive".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(("horizon", format!("horizon must be positive and finite, got {}", self.horizon)));
        }
        for (key, m) in self.matrices() {
            if m.nrows() != d || m.ncols() != d {
                return Err((key, format!("{key} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols())));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err((key, format!("{key} has non-finite entries")));
            }
        }
        let gram = &self.eta * self.eta.transpose();
        let scale = gram.norm().max(f64::MIN_POSITIVE);
        let min_gram = min_sym_eigenvalue(&gram).map_err(|e| ("eta", e.to_string()))?;
        if min_gram <= 1e-14 * scale {
            return Err(("eta", "eta is rank deficient (eta·etaᵀ is singular)".into()));
        }
        let lam = min_sym_eigenvalue(&self.r).map_err(|e| ("R", e.to_string()))?;
        if lam <= 0.0 {
            return Err(("R", format!("symmetric part of R must be positive definite, least eigenvalue {lam}")));
        }
        if let Some(init) = &self.init {
            if init.mean.len() != d {
                return Err(("init_mean", format!("init_mean has {} entries, expected {d}", init.mean.len())));
            }
            if !(init.std.is_finite() && init.std >= 0.0) {
                return Err(("init_std", "init_std must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn matrices(&self) -> [(&'static str, &DMatrix<f64>); 6] {
        [
            ("eta", &self.eta),
            ("Q", &self.q),
            ("R", &self.r),
            ("Qbar", &self.qbar),
            ("S", &self.s),
            ("QT", &self.qt),
        ]
    }

    /// ½(R + Rᵀ).
    pub fn r_sym(&self) -> DMatrix<f64> {
        symmetrize(&self.r)
    }

    /// ½(Q_T + Q_Tᵀ), the terminal Hessian G.
    pub fn terminal_hessian(&self) -> DMatrix<f64> {
        symmetrize(&self.qt)
    }

    /// −½(Q̄S + Q̄ᵀS), the constant measure-derivative matrix of ∇_y g₂.
    pub fn mfield(&self) -> DMatrix<f64> {
        -(symmetrize(&self.qbar) * &self.s)
    }
}

/// The counterexample model: a two-dimensional LQ game whose mean-path
/// boundary problem loses solvability between T = 0.1 and T = 0.11.
///
/// R carries positive off-diagonal entries. With the opposite sign (same
/// spectrum) the soft direction of R no longer aligns with the most concave
/// direction of Q̄ and det Φ₂₂ stays near 0.7 on [0.1, 0.11].
pub fn counterexample_model(horizon: f64) -> LqModel {
    let m = |a: f64, b: f64, c: f64, d: f64| DMatrix::from_row_slice(2, 2, &[a, b, c, d]);
    LqModel {
        dim: 2,
        horizon,
        eta: DMatrix::identity(2, 2),
        q: m(-0.419, -0.015, -0.015, -0.018),
        r: m(0.812, 0.826, 0.826, 0.861),
        qbar: m(-0.360, 0.416, 0.416, -0.855),
        s: DMatrix::identity(2, 2) * -0.941,
        qt: DMatrix::zeros(2, 2),
        label: "counterexample".into(),
        // A law centred at the origin leaves the unstable mean mode unexcited.
        init: Some(InitialLaw {
            mean: vec![1.0, 1.0],
            std: 0.5,
        }),
    }
}

/// Exact cost model for an [`LqModel`].
#[derive(Debug, Clone)]
pub struct LqCost {
    model: LqModel,
    q_sym: DMatrix<f64>,
    r_sym: DMatrix<f64>,
    r_sym_inv: DMatrix<f64>,
    qbar_sym: DMatrix<f64>,
    qt_sym: DMatrix<f64>,
    mfield: DMatrix<f64>,
    constants: AssumptionConstants,
    law_free: bool,
}

/// Build the exact cost model of an LQ game (validates the model).
pub fn lq_cost_model(model: &LqModel) -> Result<LqCost> {
    LqCost::new(model.clone())
}

/// Structural constants of an LQ game from eigenvalues and operator norms.
pub fn assumption_constants(model: &LqModel) -> Result<AssumptionConstants> {
    model.validate()?;
    let q_sym = symmetrize(&model.q);
    let r_sym = symmetrize(&model.r);
    let qbar_sym = symmetrize(&model.qbar);
    let qt_sym = symmetrize(&model.qt);
    let c = AssumptionConstants {
        lambda_big: min_sym_eigenvalue(&r_sym)?,
        lambda_g1: -min_sym_eigenvalue(&q_sym)?,
        lambda_g2: -min_sym_eigenvalue(&qbar_sym)?,
        lambda_h1: -min_sym_eigenvalue(&qt_sym)?,
        c_g2: operator_norm(&model.mfield())?,
        big_c_g1: operator_norm(&q_sym)?.max(operator_norm(&r_sym)?),
        big_c_g2: operator_norm(&qbar_sym)?,
        big_c_h1: operator_norm(&qt_sym)?,
    };
    c.validate()?;
    Ok(c)
}

impl LqCost {
    pub fn new(model: LqModel) -> Result<Self> {
        model.validate()?;
        let constants = assumption_constants(&model)?;
        let r_sym = model.r_sym();
        let r_sym_inv = inverse(&r_sym, "symmetrized R")?;
        let mfield = model.mfield();
        let law_free = (symmetrize(&model.qbar) * &model.s).iter().all(|x| *x == 0.0);
        Ok(LqCost {
            q_sym: symmetrize(&model.q),
            r_sym,
            r_sym_inv,
            qbar_sym: symmetrize(&model.qbar),
            qt_sym: symmetrize(&model.qt),
            mfield,
            constants,
            law_free,
            model,
        })
    }

    pub fn model(&self) -> &LqModel {
        &self.model
    }

    pub fn r_sym_inv(&self) -> &DMatrix<f64> {
        &self.r_sym_inv
    }

    fn shifted(&self, y: &[f64], law: &MeasureSummary) -> DVector<f64> {
        let m = DVector::from_column_slice(&law.mean);
        DVector::from_column_slice(y) - &self.model.s * m
    }
}

fn quad(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(m * x))
}

impl CostModel for LqCost {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn diffusion(&self) -> &DMatrix<f64> {
        &self.model.eta
    }

    fn constants(&self) -> &AssumptionConstants {
        &self.constants
    }

    fn g1(&self, y: &[f64], v: &[f64]) -> G1Eval {
        let d = self.model.dim;
        let yv = DVector::from_column_slice(y);
        let vv = DVector::from_column_slice(v);
        G1Eval {
            value: quad(&self.model.q, &yv) + quad(&self.model.r, &vv),
            grad_y: &self.q_sym * &yv,
            grad_v: &self.r_sym * &vv,
            hess_yy: self.q_sym.clone(),
            hess_yv: DMatrix::zeros(d, d),
            hess_vv: self.r_sym.clone(),
        }
    }

    fn g2(&self, y: &[f64], law: &MeasureSummary) -> G2Eval {
        let z = self.shifted(y, law);
        G2Eval {
            value: quad(&self.model.qbar, &z),
            grad_y: &self.qbar_sym * &z,
            hess_yy: self.qbar_sym.clone(),
            mfield: self.mfield.clone(),
        }
    }

    fn h1(&self, y: &[f64]) -> H1Eval {
        let yv = DVector::from_column_slice(y);
        H1Eval {
            value: quad(&self.model.qt, &yv),
            grad: &self.qt_sym * &yv,
            hess: self.qt_sym.clone(),
        }
    }

    fn h2(&self, _law: &MeasureSummary) -> f64 {
        0.0
    }

    fn grad_v_g1_into(&self, _y: &[f64], v: &[f64], out: &mut [f64]) {
        matvec_into(&self.r_sym, v, out);
    }

    fn grad_y_g1_into(&self, y: &[f64], _v: &[f64], out: &mut [f64]) {
        matvec_into(&self.q_sym, y, out);
    }

    fn grad_y_g2_into(&self, y: &[f64], law: &MeasureSummary, out: &mut [f64]) {
        let d = self.model.dim;
        let mut z = [0.0f64; 16];
        let mut heap;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        matvec_into(&self.model.s, &law.mean, z);
        for (zi, yi) in z.iter_mut().zip(y) {
            *zi = yi - *zi;
        }
        matvec_into(&self.qbar_sym, z, out);
    }

    fn grad_h1_into(&self, y: &[f64], out: &mut [f64]) {
        matvec_into(&self.qt_sym, y, out);
    }

    fn feedback_into(&self, _y: &[f64], p: &[f64], out: &mut [f64]) -> Result<()> {
        matvec_into(&self.r_sym_inv, p, out);
        out.iter_mut().for_each(|x| *x = -*x);
        Ok(())
    }

    fn law_independent(&self) -> bool {
        self.law_free
    }

    fn constant_hessians(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gradient_fd_error, solve_foc};
    use rand_chacha::rand_core::{RngCore, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_case() -> LqModel {
        let z = DMatrix::zeros(2, 2);
        LqModel {
            dim: 2,
            horizon: 1.0,
            eta: DMatrix::identity(2, 2),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(2, 2),
            qbar: z.clone(),
            s: z.clone(),
            qt: z,
            label: "identity".into(),
            init: None,
        }
    }

    #[test]
    fn identity_quadratic_evaluation() {
        let cost = lq_cost_model(&identity_case()).unwrap();
        let e = cost.g1(&[1.0, 0.0], &[0.0, 1.0]);
        assert_eq!(e.value, 1.0);
        assert_eq!(e.grad_v.as_slice(), &[0.0, 1.0]);
        assert_eq!(e.hess_vv, DMatrix::identity(2, 2));
    }

    #[test]
    fn counterexample_mfield_norm() {
        let m = counterexample_model(0.1);
        let cost = lq_cost_model(&m).unwrap();
        let g2 = cost.g2(&[0.3, -0.2], &MeasureSummary::dirac(&[1.0, 2.0]));
        let expected = &m.qbar * 0.941;
        assert!((&g2.mfield - &expected).norm() < 1e-15);
        let norm = operator_norm(&g2.mfield).unwrap();
        assert!((norm - 1.027).abs() < 5e-4, "norm {norm}");
        assert!((norm - cost.constants().c_g2).abs() < 1e-12);
    }

    #[test]
    fn scalar_mfield() {
        let m = LqModel::scalar(1.0, 2.0, 0.1, 0.5, 1.0, 1.0, 0.5);
        assert!((m.mfield()[(0, 0)] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn counterexample_constants() {
        let c = assumption_constants(&counterexample_model(0.1)).unwrap();
        assert!((c.lambda_big - 0.010137).abs() < 5e-7, "{}", c.lambda_big);
        assert!((c.lambda_g1 - 0.41956).abs() < 5e-6, "{}", c.lambda_g1);
        assert!((c.lambda_g2 - 1.0916).abs() < 5e-5, "{}", c.lambda_g2);
        assert!((c.c_g2 - 1.027).abs() < 5e-4, "{}", c.c_g2);
        assert_eq!(c.lambda_h1, 0.0);
    }

    #[test]
    fn identity_r_constants() {
        let z = DMatrix::zeros(2, 2);
        let m = LqModel {
            q: z.clone(),
            ..identity_case()
        };
        let c = assumption_constants(&m).unwrap();
        assert_eq!(c.lambda_big, 1.0);
        assert_eq!(c.lambda_g1, 0.0);
        assert_eq!(c.lambda_g2, 0.0);
        assert_eq!(c.lambda_h1, 0.0);
        assert_eq!(c.c_g2, 0.0);
        // ∇²g₁ contains the R block, so its norm is 1.
        assert_eq!(c.big_c_g1, 1.0);
        assert_eq!(c.big_c_g2, 0.0);
        assert_eq!(c.big_c_h1, 0.0);
    }

    #[test]
    fn scalar_constants() {
        let c = assumption_constants(&LqModel::scalar(1.0, 2.0, 0.1, 0.5, 1.0, 1.0, 0.5)).unwrap();
        assert_eq!(c.lambda_big, 2.0);
        assert_eq!(c.lambda_g1, -1.0);
        assert_eq!(c.lambda_g2, -0.1);
        assert_eq!(c.lambda_h1, -1.0);
        assert!((c.c_g2 - 0.05).abs() < 1e-15);
    }

    #[test]
    fn diagonal_model_constants_are_exact() {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        let m = LqModel {
            dim: 3,
            horizon: 1.0,
            eta: DMatrix::identity(3, 3),
            q: diag(&[0.3, -1.7, 2.5]),
            r: diag(&[4.0, 0.25, 1.5]),
            qbar: diag(&[-0.2, 0.9, 0.1]),
            s: DMatrix::identity(3, 3) * 0.5,
            qt: diag(&[1.0, -3.0, 0.0]),
            label: String::new(),
            init: None,
        };
        let c = assumption_constants(&m).unwrap();
        assert!((c.lambda_big - 0.25).abs() < 1e-12);
        assert!((c.lambda_g1 - 1.7).abs() < 1e-12);
        assert!((c.lambda_g2 - 0.2).abs() < 1e-12);
        assert!((c.lambda_h1 - 3.0).abs() < 1e-12);
        assert!((c.c_g2 - 0.45).abs() < 1e-12);
        assert!((c.big_c_g1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn counterexample_feedback_satisfies_foc() {
        let m = counterexample_model(0.1);
        let cost = lq_cost_model(&m).unwrap();
        let v = solve_foc(&cost, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        let rr = &m.r + m.r.transpose();
        let expected = -2.0 * inverse(&rr, "R+Rᵀ").unwrap() * DVector::from_column_slice(&[1.0, 0.0]);
        for i in 0..2 {
            assert!((v[i] - expected[i]).abs() <= 1e-9 * expected[i].abs().max(1.0));
        }
        let mut g = [0.0; 2];
        cost.grad_v_g1_into(&[0.0, 0.0], &v, &mut g);
        let resid = ((g[0] + 1.0).powi(2) + g[1].powi(2)).sqrt();
        assert!(resid <= 1e-12 * 2.0, "resid {resid}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = counterexample_model(0.1);
        let cost = lq_cost_model(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0;
        for _ in 0..100 {
            let y = [u(), u()];
            let v = [u(), u()];
            let law = MeasureSummary::dirac(&[u(), u()]);
            let err = gradient_fd_error(&cost, &y, &v, &law, 1e-5);
            assert!(err <= 1e-6, "fd error {err}");
        }
    }

    #[test]
    fn fast_paths_agree_with_full_evaluations() {
        let m = counterexample_model(0.1);
        let cost = lq_cost_model(&m).unwrap();
        let y = [0.7, -1.3];
        let v = [0.2, 0.9];
        let law = MeasureSummary::dirac(&[0.5, 0.25]);
        let mut out = [0.0; 2];
        cost.grad_y_g2_into(&y, &law, &mut out);
        let full = cost.g2(&y, &law).grad_y;
        assert!((out[0] - full[0]).abs() < 1e-15 && (out[1] - full[1]).abs() < 1e-15);
        cost.grad_y_g1_into(&y, &v, &mut out);
        let full = cost.g1(&y, &v).grad_y;
        assert!((out[0] - full[0]).abs() < 1e-15 && (out[1] - full[1]).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_models() {
        let mut m = identity_case();
        m.eta = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(m.validate(), Err(Error::InvalidModel(_))));
        let mut m = identity_case();
        m.r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(lq_cost_model(&m).is_err());
        let mut m = identity_case();
        m.q = DMatrix::zeros(3, 3);
        assert_eq!(m.validate_keyed().unwrap_err().0, "Q");
    }

    #[test]
    fn law_independence_flag() {
        assert!(lq_cost_model(&identity_case()).unwrap().law_independent());
        assert!(!lq_cost_model(&counterexample_model(0.1)).unwrap().law_independent());
    }
}
