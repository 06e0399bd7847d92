use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A model or function argument lies outside its physical domain.
    #[error("parameter `{name}` out of domain: {reason} (got {value})")]
    ParameterDomain {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// The estimator has no defined value for these inputs (e.g. a zero denominator).
    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),

    #[error("fit is degenerate: {0}")]
    FitDegenerate(String),

    #[error("requested value lies outside the fitted domain: {0}")]
    OutsideDomain(String),

    #[error("run size error: {0}")]
    RunSize(String),

    /// Malformed or out-of-order event or sweep data. `line` is 1-based; 0 means
    /// the position is a binary record index or not applicable.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::ParameterDomain {
            name,
            value,
            reason,
        }
    }

    pub(crate) fn format(line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            line,
            message: message.into(),
        }
    }
}
