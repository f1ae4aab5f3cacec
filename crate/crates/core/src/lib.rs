//! Simulation, filtering and maximum-principle tools for partially observed
//! regime-switching diffusions.
//!
//! A scalar state `X` is driven by a Brownian motion and a hidden two-state
//! Markov chain `alpha`; the controller observes `X` only. [`wonham`] turns
//! the problem into a completely observed one in `(X, pi)` with
//! `pi = P(alpha = 1 | X)`, [`adjoint`] solves the adjoint equation of that
//! system, and [`lq`] computes the observable optimal control of the
//! linear-quadratic case.

// NaN-rejecting `!(x > 0.0)` guards and index loops over aligned arrays are
// deliberate throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod adjoint;
pub mod error;
pub mod lq;
pub mod model;
pub mod pathsim;
pub mod regress;
pub mod rng;
pub mod stats;
pub mod wonham;

pub use error::{Error, Result};
