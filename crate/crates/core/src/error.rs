//! Error taxonomy shared by every module.
//!
//! `Config` covers malformed inputs (files, dimensions, parameter ranges) and
//! maps to CLI exit code 2; everything else is a numerical or validation
//! failure and maps to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BhjbError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("incomplete data: {0}")]
    IncompleteData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BhjbError>;

impl BhjbError {
    /// Process exit code the CLI assigns to this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            BhjbError::Config(_) | BhjbError::Dimension(_) | BhjbError::Json(_) => 2,
            _ => 3,
        }
    }
}
