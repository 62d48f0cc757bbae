//! Error types shared across the toolkit.
//!
//! Two broad classes matter at the CLI boundary: contract violations
//! (malformed runtime input, broken invariants) map to exit code 1,
//! configuration errors (bad flags, unreadable config, wrong embedding
//! dimensionality) map to exit code 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DgError {
    /// A runtime precondition or invariant was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration: unknown flags, missing files, dimension mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DgError {
    pub fn contract(msg: impl Into<String>) -> Self {
        DgError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        DgError::Config(msg.into())
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DgError::Contract(_) => 1,
            DgError::Config(_) | DgError::Io(_) | DgError::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, DgError>;
