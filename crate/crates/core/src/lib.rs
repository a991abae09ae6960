//! Options market making on a strike x maturity grid.
//!
//! The crate simulates a delta-hedged option book that quotes bid/ask spreads
//! against Poisson order flow whose intensity falls linearly in the spread,
//! derives the entropy-regularized Gaussian quoting policy from a value
//! function in closed form, and trains value and policy networks with policy
//! iteration or actor-critic.

// `!(x > 0.0)` is used on purpose so NaN fails validation; math kernels take many scalars.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod approximator;
pub mod error;
pub mod harness;
pub mod market_sim;
pub mod matrix;
pub mod policy;
pub mod pricing;
pub mod rl_algos;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::{Inventory, Matrix};
