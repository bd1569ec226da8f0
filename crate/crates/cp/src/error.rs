use std::fmt;

use thiserror::Error;
use vidsparse_core::CoreError;

/// The planner constraint that rules out every candidate configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Memory,
    HeadCount,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Memory => "memory",
            Constraint::HeadCount => "head count",
        })
    }
}

#[derive(Debug, Error)]
pub enum CpError {
    #[error("invalid input to {op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    #[error("no feasible configuration ({binding} constraint binds): {detail}")]
    Infeasible { binding: Constraint, detail: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CpError {
    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CpError::InvalidInput { op, detail: detail.into() }
    }
}

pub type Result<T, E = CpError> = std::result::Result<T, E>;
