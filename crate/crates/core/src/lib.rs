//! Click-calibrated, diversity-aware preference optimization for generative
//! query suggestion, with a synthetic click simulator as ground truth.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod config;
pub mod context;
pub mod ctr;
pub mod dpo;
pub mod encoder;
pub mod error;
pub mod math;
pub mod metrics;
pub(crate) mod nn;
pub mod pipeline;
pub mod policy;
pub mod prefs;
pub mod rng;
pub mod sim;
pub mod similarity;
pub mod suggestion;
pub mod tokens;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{GqsError, Result};
