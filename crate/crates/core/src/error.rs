use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator library and CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or operation input violated its contract.
    #[error("invalid value for `{field}`: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A trace or config file could not be parsed.
    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Affinity placement cannot fit every expert into the available slots.
    #[error("infeasible placement: {experts} experts do not fit into {gpus} GPUs x {slots} slots")]
    InfeasiblePlacement {
        experts: usize,
        gpus: usize,
        slots: usize,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 usage/validation, 3 I/O, 4 invariant.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidField { .. }
            | Error::ShapeMismatch(_)
            | Error::Parse { .. }
            | Error::InfeasiblePlacement { .. } => 2,
            Error::Io { .. } => 3,
            Error::Invariant(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
