//! Mean-field-game forward–backward SDE solver.
//!
//! The crate is organised around the pieces of a McKean–Vlasov FBSDE
//! experiment:
//!
//! - [`model`]: cost models (the linear-quadratic family and a pluggable
//!   analytic interface) and the structural constants they imply.
//! - [`lq_oracle`]: closed-form linear-quadratic machinery (fundamental
//!   matrices, Riccati decoupling, blow-up detection).
//! - [`measure`]: particle ensembles, empirical moments, Wasserstein
//!   diagnostics and order-independent Brownian streams.
//! - [`solver`]: the concatenated local Picard scheme with regression-based
//!   decoupling fields.
//! - [`analysis`]: assumption and monotonicity checks, the Jacobian flow,
//!   value-function and HJB diagnostics.

pub mod analysis;
pub mod error;
pub mod linalg;
pub mod lq_oracle;
pub mod measure;
pub mod model;
pub mod reduce;
pub mod solver;

pub use error::{Error, Result};
