use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error("row {row}: missing field {field}")]
    MissingField { row: usize, field: String },

    #[error("row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { id: String, row: usize },

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("cannot normalize zero vector")]
    ZeroVector,

    #[error("non-finite value in vector")]
    NonFinite,

    #[error("record {record}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        record: usize,
        expected: usize,
        found: usize,
    },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: Vec<u8> },

    #[error("truncated or corrupt file: {0}")]
    Corrupt(String),

    #[error("missing embedding for key {0:?}")]
    MissingKey(String),

    #[error("missing embeddings for ids: {}", .0.join(", "))]
    MissingKeys(Vec<String>),

    #[error("document text is empty")]
    EmptyDocument,

    #[error("no passages to rank")]
    NoPassages,

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset is unlabeled (pair {0:?} has no category)")]
    Unlabeled(String),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("length mismatch: {left} predictions vs {right} gold labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
