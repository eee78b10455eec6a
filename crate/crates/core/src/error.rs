//! Crate-wide error type.
//!
//! Errors are split by who is at fault: `Validation` and `Config` mean the
//! caller handed us something inconsistent (CLI exit code 1), `Runtime` and
//! `Io` mean a run failed underway (exit code 2).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument values or shape mismatches detected at an operation boundary.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or incomplete configuration (missing checkpoint, bad spec).
    #[error("configuration error: {0}")]
    Config(String),

    /// Failure while a run is underway (non-finite loss, corrupt checkpoint).
    #[error("runtime error: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }

    /// True when the error is the caller's fault (maps to CLI exit code 1).
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
