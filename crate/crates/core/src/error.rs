use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    /// The requested storage budget cannot be met even with the largest leaf error.
    #[error("budget of {budget} bytes is too small (needs at least {required:.0} bytes)")]
    BudgetTooSmall { budget: u64, required: f64 },

    /// An estimator precondition does not hold for this input (e.g. G <= 1).
    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
