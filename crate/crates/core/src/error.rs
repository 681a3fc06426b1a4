use thiserror::Error;

/// Errors produced by the sampling engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("token {token} at position {position} is outside [0, {categories})")]
    TokenOutOfRange {
        position: usize,
        token: usize,
        categories: usize,
    },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not an IDX file")]
    NotIdx,

    #[error("short read at byte {0}")]
    ShortRead(usize),

    #[error("bad {kind} header: {reason}")]
    BadHeader { kind: &'static str, reason: String },

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl ToString,
    found: impl ToString,
) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}
