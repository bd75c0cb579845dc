//! Bayesian network meta-analysis of time-to-event outcomes with M-spline
//! baseline hazards and weighted random walk shrinkage priors.

pub mod basis;
pub mod data;
pub mod diagnostics;
pub mod knots;
pub mod model;
pub mod error;
pub mod prior_predictive;
pub mod priors;
pub mod products;
pub mod sampler;
pub mod stats;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
