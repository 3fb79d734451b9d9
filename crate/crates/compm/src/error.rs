//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values where finite ones are required.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A class index outside the configured label inventory.
    #[error("label index {index} out of range for {classes} classes (example {example})")]
    LabelOutOfRange {
        index: usize,
        classes: usize,
        example: usize,
    },

    /// A label string that the taxonomy does not know.
    #[error("unknown label `{label}`; valid classes: [{}]", valid.join(", "))]
    UnknownLabel { label: String, valid: Vec<String> },

    /// More conversation participants than reserved speaker tokens.
    #[error(
        "conversation `{conversation}` has {participants} participants but only {capacity} \
         speaker tokens are reserved; raise the speaker capacity"
    )]
    SpeakerCapacity {
        conversation: String,
        participants: usize,
        capacity: usize,
    },

    /// Malformed input data; carries the source location.
    #[error("data error at {path}:{line}: {msg}")]
    Data {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("taxonomy error: {0}")]
    Taxonomy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged; the last finite-loss checkpoint (if any) is preserved.
    #[error("training diverged at step {step} (non-finite loss); last good checkpoint: {last_good:?}")]
    Divergence {
        step: usize,
        last_good: Option<PathBuf>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
