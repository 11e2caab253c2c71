//! Stochastic-control toolkit for a delta-neutral carry position: long spot
//! against short perpetual, earning staking yield plus funding on a
//! mean-reverting basis while paying quadratic execution costs.
//!
//! The state is the basis `D`, the position `N` and cash `X`:
//!
//! ```text
//! dD = (-kappa (D - m) - mu gamma) dt + c dW
//! dN = gamma dt
//! dX = ([(q + kappa) D - kappa m + r + mu gamma] N - lam gamma^2) dt - c N dW
//! ```
//!
//! * [`model`] — parameters, validation and the dynamics above.
//! * [`ih_solver`] — discounted stationary problem, solved in closed form.
//! * [`fh_solver`] — finite-horizon problem with a liquidation penalty,
//!   solved by backward RK4 on the coefficient ODEs.
//! * [`simulator`] — seeded Euler–Maruyama paths and Monte-Carlo objectives.
//! * [`verifier`] — HJB residuals, optimality checks and formula probes.

// `!(x > 0.0)` is deliberate: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fh_solver;
pub mod ih_solver;
pub mod model;
pub mod simulator;
pub mod verifier;

pub use error::{Error, Result};
pub use fh_solver::{integrate_backward, FHCoefficientPath, FHFeedback};
pub use ih_solver::{solve_ih, IHCoefficients, IHFeedback, IHSolution};
pub use model::{validate, ModelParams, ValidationReport};
pub use simulator::{HorizonKind, McEstimate, PathRecord, Policy, SimConfig};
pub use verifier::ResidualReport;
