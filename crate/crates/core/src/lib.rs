//! Introspective classification toolkit: concrete-dropout and Kronecker-factored
//! Laplace Bayesian MLPs, Monte-Carlo predictive uncertainty, calibration metrics,
//! CRF context smoothing, and an uncertainty-gated domain-adaptation loop.

// `!(x > 0.0)` deliberately rejects NaN; symmetric-matrix loops read best with indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adapt;
pub mod bnn;
pub mod crf;
pub mod dataio;
pub mod error;
pub mod experiments;
pub mod laplace;
pub mod metrics;
pub mod numerics;
pub mod predictive;

pub use error::{Error, Result};
