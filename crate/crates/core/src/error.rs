use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AuditError>;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at data row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dataset `{0}` contains no data rows")]
    EmptyDataset(PathBuf),

    #[error("split error: {0}")]
    Split(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("labels contain a single class; need both 0 and 1")]
    DegenerateLabels,

    #[error("singular system: {0}")]
    Singular(String),

    #[error("importance alignment error: {0}")]
    Alignment(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("average over an empty group is undefined")]
    EmptyGroup,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("brute force refused: {profiles} distinct profiles exceeds the limit of {limit}")]
    TooManyProfiles { profiles: usize, limit: usize },

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AuditError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        AuditError::Dimension {
            context,
            expected,
            actual,
        }
    }
}
