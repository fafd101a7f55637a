use thiserror::Error;

use crate::simex::LambdaTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("extrapolant pole: d = {d} is within tolerance of the evaluation point")]
    Pole { d: f64 },

    #[error("extrapolation failed: {source}")]
    Extrapolation {
        #[source]
        source: Box<Error>,
        /// The λ-trace computed before the failure, kept for inspection.
        trace: Box<LambdaTrace>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
