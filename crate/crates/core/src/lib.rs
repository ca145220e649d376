//! Design and analysis engine for two-stage adaptive cluster randomised trials.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] builds layouts and cluster-period working covariances,
//! * [`inference`] computes the stage-wise score statistics and weights,
//! * [`power`] evaluates conditional and total power,
//! * [`optimiser`] searches stage 2 designs and calibrates decision rules,
//! * [`pareto`] compares calibrated stage 1 designs,
//! * [`interim`] re-estimates correlation parameters from stage 1 data,
//! * [`sim`] replays whole trials by Monte Carlo.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
pub mod error;
pub mod inference;
pub mod interim;
pub mod model;
pub mod optimiser;
pub mod par;
pub mod pareto;
pub mod power;
pub mod quad;
pub mod roots;
pub mod sim;

pub use error::{Error, Result};
