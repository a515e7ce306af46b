use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DasError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("numeric abort at {context}: {detail}")]
    NumericAbort { context: String, detail: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DasError {
    /// Process exit status for this error: 2 parse, 3 validation, 4 numeric abort, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DasError::Parse { .. } => 2,
            DasError::Validation(_) => 3,
            DasError::NumericAbort { .. } => 4,
            _ => 1,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        DasError::Usage(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        DasError::Validation(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DasError::Io {
            path: path.into(),
            source,
        }
    }
}
