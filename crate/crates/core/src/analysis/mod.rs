//! Numerical witnesses for the structural theory: assumption margins,
//! monotonicity tests, the Jacobian flow with its a-priori bound, and
//! value-function diagnostics.

mod assumptions;
mod jacobian;
mod monotonicity;
mod value;

pub use assumptions::{assumption_report, cg2_cap, check_assumptions, ci_margin, cii_margin, cii_star, lifespan, AssumptionReport};
pub use jacobian::{balanced_gamma3, c2_bound, jacobian_flow_solve, Direction, JacobianFlowResult, BOUND_SLACK};
pub use monotonicity::{monotonicity_at, monotonicity_check, schur_g1, MonotonicityReport, MONOTONE_TOL, SAMPLED_DIRECTIONS};
pub use value::{hjb_residual, value_function, HjbResidual, Lattice, ValueEstimate, FD_STEP, MIN_PATHS};
