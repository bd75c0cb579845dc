use thiserror::Error;

/// Errors raised by the modelling library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid knots: {0}")]
    InvalidKnots(String),

    #[error("spline order must be at least 1, got {0}")]
    InvalidOrder(usize),

    #[error("time {time} lies outside the boundary interval [{lower}, {upper}]")]
    TimeOutOfRange { time: f64, lower: f64, upper: f64 },

    #[error("study {study}: {message}")]
    KnotPlacement { study: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid model specification: {0}")]
    Spec(String),

    #[error("record {record}: hazard is zero at an event time")]
    ZeroHazard { record: usize },

    #[error("sampler failed: {0}")]
    Sampler(String),

    #[error("degenerate covariance for {0}; consider adding a small ridge to the diagonal")]
    DegenerateCovariance(String),
}

pub type Result<T> = std::result::Result<T, Error>;
