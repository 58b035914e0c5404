use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CrdaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CrdaError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} out of range: {detail}")]
    OutOfRange { what: &'static str, detail: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    /// Single-class label set; AUC is undefined.
    #[error("AUC undefined: labels contain a single class")]
    UndefinedAuc,

    #[error("non-finite value in {term}{}", epoch.map(|e| format!(" at epoch {e}")).unwrap_or_default())]
    NonFinite { term: String, epoch: Option<usize> },

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape mismatch for `{name}`: expected {expected}, found {found}")]
    CheckpointShape {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CrdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrdaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(term: impl Into<String>) -> Self {
        CrdaError::NonFinite {
            term: term.into(),
            epoch: None,
        }
    }

    pub(crate) fn out_of_range(what: &'static str, detail: impl Into<String>) -> Self {
        CrdaError::OutOfRange {
            what,
            detail: detail.into(),
        }
    }

    /// Tags a non-finite error with the epoch it occurred in, if not already set.
    pub fn at_epoch(self, epoch: usize) -> Self {
        match self {
            CrdaError::NonFinite { term, epoch: None } => CrdaError::NonFinite {
                term,
                epoch: Some(epoch),
            },
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, CrdaError::NonFinite { .. })
    }

    pub fn is_config(&self) -> bool {
        matches!(self, CrdaError::Config { .. })
    }
}
