use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the imputation library.
#[derive(Debug, Error)]
pub enum TdmError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("cannot parse {value:?} as a number at row {row}, column {col}")]
    NonNumeric {
        row: usize,
        col: usize,
        value: String,
    },

    #[error("dataset has no rows")]
    Empty,

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    Shape {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("column {0} has no observed entries")]
    ColumnFullyMissing(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible request: {0}")]
    Infeasible(String),

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl TdmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TdmError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, TdmError::NonFinite(_) | TdmError::LineSearch(_))
    }
}

pub type Result<T> = std::result::Result<T, TdmError>;
