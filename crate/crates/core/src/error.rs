use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum CsdmError {
    #[error("dimension mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Dimension {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset is empty: {0}")]
    DatasetEmpty(String),

    #[error("split protocol: {0}")]
    Protocol(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("lookup out of range: field {field} index {index} >= vocabulary {vocab}")]
    Lookup {
        field: String,
        index: usize,
        vocab: usize,
    },

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CsdmError> = std::result::Result<T, E>;

impl CsdmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CsdmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(lhs: &[usize], rhs: &[usize], context: &'static str) -> Self {
        CsdmError::Dimension {
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            context,
        }
    }
}
