use thiserror::Error;

use crate::grid::GridIndex;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("grid index ({}, {}) out of bounds for {height}x{width} grid", .index.row, .index.col)]
    OutOfBounds {
        index: GridIndex,
        height: usize,
        width: usize,
    },

    #[error("grid index ({}, {}) lies inside a building", .0.row, .0.col)]
    MaskedCell(GridIndex),

    #[error("duplicate measurement position ({}, {})", .0.row, .0.col)]
    DuplicatePosition(GridIndex),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("requested {requested} samples but only {available} outdoor cells exist")]
    InsufficientCells { requested: usize, available: usize },

    #[error("non-finite value in parameter group `{group}` (flat index {index})")]
    NonFiniteParam { group: String, index: usize },

    #[error("non-finite {what}")]
    NonFinite { what: String },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("all {attempts} optimization attempts diverged")]
    Diverged { attempts: usize },

    #[error(
        "{failed} of {total} Monte-Carlo runs failed (at most 10% allowed); first error: {first}"
    )]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
