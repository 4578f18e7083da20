use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("batch too small: need at least {min}, got {got}")]
    Batch { min: usize, got: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl LabError {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        LabError::Config {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config { .. } | LabError::Shape { .. } | LabError::Batch { .. } => 2,
            LabError::Io { .. } | LabError::Parse { .. } => 3,
            LabError::Index { .. } | LabError::Metric(_) | LabError::NonFinite { .. } => 4,
        }
    }
}
