use std::path::PathBuf;

use thiserror::Error;

use crate::kernel::ShapeError;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("invalid entity {entity}: {reason}")]
    InvalidEntity { entity: String, reason: String },

    #[error("invalid sentence: {0}")]
    InvalidSentence(String),

    #[error("duplicate entity mention {0}")]
    DuplicateMention(String),

    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),

    #[error("cell ({row}, {col}) is claimed by entity types `{first}` and `{second}`")]
    TypeCollision {
        row: usize,
        col: usize,
        first: String,
        second: String,
    },

    #[error("grid violates triangle discipline at ({row}, {col}): label `{label}`")]
    TriangleViolation {
        row: usize,
        col: usize,
        label: String,
    },

    #[error("anchor (tail {tail}, head {head}, {entity_type}) has more than {cap} valid paths")]
    PathCap {
        tail: usize,
        head: usize,
        entity_type: String,
        cap: usize,
    },

    #[error(transparent)]
    Shape(#[from] ShapeError),

    #[error("non-finite loss on example `{id}`")]
    NonFiniteLoss { id: String },

    #[error("non-finite parameter `{0}` after optimizer step")]
    NonFiniteParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("prediction and gold ids do not align: {0}")]
    Unaligned(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numeric machinery rather than of the input data.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Shape(_) | Error::NonFiniteLoss { .. } | Error::NonFiniteParameter(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
