//! Horizon-dependent margins of the structural assumptions.

use serde::Serialize;

use crate::error::Result;
use crate::model::{assumption_constants, AssumptionConstants, LqModel};

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Λ − (λ_{h₁})₊T − (λ_{g₁}+λ_{g₂})₊T²/2: the convexity margin without
/// mean-field sensitivity.
pub fn ci_margin(c: &AssumptionConstants, horizon: f64) -> f64 {
    c.lambda_big - pos(c.lambda_h1) * horizon - pos(c.lambda_g1 + c.lambda_g2) * horizon * horizon / 2.0
}

/// Λ − (λ_{h₁})₊T − (λ_{g₁}+λ_{g₂}+c_{g₂})₊T²/2: the small mean-field margin.
/// Never exceeds [`ci_margin`] since c_{g₂} ≥ 0.
pub fn cii_margin(c: &AssumptionConstants, horizon: f64) -> f64 {
    c.lambda_big - pos(c.lambda_h1) * horizon - pos(c.mean_field_deficit()) * horizon * horizon / 2.0
}

/// Horizon-free regime: λ_{h₁} < 0 and λ_{g₁}+λ_{g₂}+c_{g₂} < 0.
pub fn cii_star(c: &AssumptionConstants) -> bool {
    c.lambda_h1 < 0.0 && c.mean_field_deficit() < 0.0
}

/// Largest horizon on which the small mean-field margin stays positive, or
/// `None` when it is positive for every horizon.
pub fn lifespan(c: &AssumptionConstants) -> Option<f64> {
    let s = c.mean_field_deficit();
    if s <= 0.0 {
        return None;
    }
    let h = pos(c.lambda_h1);
    Some(((2.0 * c.lambda_big * s + h * h).sqrt() - h) / s)
}

/// Largest c_{g₂} compatible with the small mean-field margin on a horizon
/// of length `horizon`, all other constants fixed.
pub fn cg2_cap(c: &AssumptionConstants, horizon: f64) -> f64 {
    let budget = -(c.lambda_g1 + c.lambda_g2);
    if c.c_g2 <= budget {
        budget
    } else {
        2.0 * (c.lambda_big - pos(c.lambda_h1) * horizon) / (horizon * horizon) + budget
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub constants: AssumptionConstants,
    pub horizon: f64,
    pub ci_margin: f64,
    pub cii_margin: f64,
    pub cii_star: bool,
    /// `None` means unbounded.
    pub lifespan_t0: Option<f64>,
    pub cg2_cap: f64,
}

pub fn assumption_report(c: &AssumptionConstants, horizon: f64) -> AssumptionReport {
    AssumptionReport {
        constants: *c,
        horizon,
        ci_margin: ci_margin(c, horizon),
        cii_margin: cii_margin(c, horizon),
        cii_star: cii_star(c),
        lifespan_t0: lifespan(c),
        cg2_cap: cg2_cap(c, horizon),
    }
}

/// Margins of an LQ model on a horizon of length `horizon`.
pub fn check_assumptions(model: &LqModel, horizon: f64) -> Result<AssumptionReport> {
    Ok(assumption_report(&assumption_constants(model)?, horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::counterexample_model;
    use proptest::prelude::*;

    #[test]
    fn counterexample_margins() {
        let m = counterexample_model(0.11);
        let r = check_assumptions(&m, 0.11).unwrap();
        assert!((r.ci_margin - 0.000994).abs() < 2e-5, "{}", r.ci_margin);
        let r = check_assumptions(&m, 0.1).unwrap();
        assert!((r.cii_margin + 0.00255).abs() < 2e-5, "{}", r.cii_margin);
        assert!(!r.cii_star);
        let t0 = r.lifespan_t0.unwrap();
        assert!((t0 - 0.0894).abs() < 1e-3, "{t0}");
        // The margin vanishes exactly at the lifespan.
        assert!(cii_margin(&r.constants, t0).abs() < 1e-12);
    }

    #[test]
    fn convex_model_has_unbounded_lifespan() {
        let m = LqModel::scalar(1.0, 1.0, 0.5, 0.5, 1.0, 1.0, 1.0);
        let r = check_assumptions(&m, 50.0).unwrap();
        assert!(r.cii_star);
        assert_eq!(r.lifespan_t0, None);
        assert_eq!(r.cii_margin, r.constants.lambda_big);
        assert_eq!(r.cg2_cap, -(r.constants.lambda_g1 + r.constants.lambda_g2));
    }

    #[test]
    fn cap_is_the_margin_root_in_c_g2() {
        let c = counterexample_model(0.1);
        let mut k = assumption_constants(&c).unwrap();
        let t = 0.05;
        let cap = cg2_cap(&k, t);
        k.c_g2 = cap;
        assert!(cii_margin(&k, t).abs() < 1e-12);
    }

    fn constants() -> impl Strategy<Value = AssumptionConstants> {
        (0.01..5.0f64, -3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64, 0.0..3.0f64).prop_map(|(lb, g1, g2, h1, c)| AssumptionConstants {
            lambda_big: lb,
            lambda_g1: g1,
            lambda_g2: g2,
            lambda_h1: h1,
            c_g2: c,
            big_c_g1: 1.0,
            big_c_g2: 1.0,
            big_c_h1: 1.0,
        })
    }

    proptest! {
        #[test]
        fn cii_never_exceeds_ci(c in constants(), t in 0.0..10.0f64) {
            prop_assert!(cii_margin(&c, t) <= ci_margin(&c, t) + 1e-12);
        }

        #[test]
        fn margin_positive_before_lifespan(c in constants(), frac in 0.0..0.999f64) {
            if let Some(t0) = lifespan(&c) {
                prop_assert!(cii_margin(&c, frac * t0) > 0.0);
                prop_assert!(cii_margin(&c, t0 * 1.001) < 0.0);
            }
        }
    }
}
