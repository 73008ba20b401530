use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum AmelError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("uninitialized running statistics")]
    UninitializedStats,

    #[error("masked_softmax: row {row} has no unmasked entries")]
    EmptyMaskRow { row: usize },

    #[error("loss is not a scalar (shape {shape:?})")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },

    #[error("unexpected end of file while reading {section}")]
    UnexpectedEnd { section: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AmelError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> AmelError {
    AmelError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn config_err(field: impl Into<String>, reason: impl Into<String>) -> AmelError {
    AmelError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}
