//! Shared error type for all toolkit operations.

use thiserror::Error;

/// Errors surfaced by builders, solvers and run drivers.
///
/// `Config` maps to CLI exit code 2 (bad input, with a field path);
/// `Refusal` maps to exit code 3 (the computation declined to proceed,
/// e.g. a dimension cap or a solver that failed to certify its result).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {path}: {reason}")]
    Config { path: String, reason: String },

    #[error("refusal: {0}")]
    Refusal(String),

    #[error("dimension overflow: requested basis has {requested} states, cap is {cap}")]
    DimensionOverflow { requested: u64, cap: u64 },

    #[error("lapack {routine} failed: info = {info}")]
    Lapack { routine: &'static str, info: i32 },

    #[error("eigensolver did not converge: {0}")]
    NoConvergence(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn refusal(msg: impl Into<String>) -> Self {
        Error::Refusal(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
