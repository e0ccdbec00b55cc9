use std::io;

use thiserror::Error;

/// Errors raised anywhere in the perception and learning core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called before a forward pass was recorded")]
    NotForwarded,

    #[error("non-finite gradient in layer {layer}; step refused")]
    NonFiniteGradient { layer: usize },

    #[error("parse error in field `{field}`: {reason}")]
    Parse { field: &'static str, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("unrecognized magic header or unsupported format version {found}")]
    Version { found: String },

    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("file too short to be a checkpoint ({len} bytes)")]
    Truncated { len: usize },

    #[error("missing section `{0}`")]
    MissingSection(String),

    #[error("malformed section `{tag}`: {reason}")]
    Malformed { tag: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, actual: impl ToString) -> Error {
    Error::Shape {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
