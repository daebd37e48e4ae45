//! Error type shared by every module in the crate.

use crate::odesolve::FlatTrajectory;
use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or layout disagreement between two values.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A scalar argument was outside its admissible range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A non-finite value appeared during numerical work.
    #[error("numerical failure at t = {t}: {what}")]
    Numerical { t: f64, what: String },

    /// The solver exhausted its step budget; the partial trajectory is kept.
    #[error("step budget exhausted after {steps} steps at t = {t}")]
    Budget {
        steps: usize,
        t: f64,
        partial: Box<FlatTrajectory>,
    },

    /// The requested combination of options is not supported.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// Malformed input data (empty trajectory, bad CSV row, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// The optimizer refused a step (e.g. non-finite gradient).
    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
