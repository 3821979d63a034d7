use std::io;

use thiserror::Error;

/// Errors produced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid code: index {index} in subspace {subspace} exceeds {k} centroids")]
    Code { subspace: usize, index: usize, k: usize },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("could not place {wells} wells with separation {separation} after {attempts} attempts")]
    Placement { wells: usize, separation: f64, attempts: usize },

    #[error("id sets do not match: {0}")]
    Join(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error: 3 for invalid configuration or
    /// input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension { .. }
            | Error::Config { .. }
            | Error::Code { .. }
            | Error::Range(_)
            | Error::InvalidValue(_)
            | Error::Parse(_)
            | Error::Json(_)
            | Error::EmptyInput(_)
            | Error::InsufficientData(_)
            | Error::Join(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
