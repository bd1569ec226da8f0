use std::io;

use thiserror::Error;

/// Errors raised by the core sparse-attention pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input to {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CoreError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::InvalidInput { op, detail: detail.into() }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
