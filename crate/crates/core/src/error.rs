use thiserror::Error;

use crate::model::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sequence of length {len} exceeds context window {max_ctx}")]
    ContextOverflow { len: usize, max_ctx: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    OutOfVocab { id: u32, vocab_size: usize },

    #[error("forward trace does not belong to this checkpoint and token sequence")]
    MismatchedTrace,

    /// Training produced a non-finite loss. `last` holds the last checkpoint
    /// whose loss was finite.
    #[error("training diverged at epoch {epoch} (step {step})")]
    Diverged {
        epoch: usize,
        step: usize,
        last: Box<Checkpoint>,
    },

    #[error("unknown anchor {0:?}: not a profile name in the corpus")]
    UnknownAnchor(String),

    #[error("tokenizer mismatch: {0}")]
    TokenizerMismatch(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad inputs or configuration, as opposed to failures
    /// that happen while running numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch { .. }
                | Error::InvalidArgument(_)
                | Error::EmptyInput(_)
                | Error::ContextOverflow { .. }
                | Error::OutOfVocab { .. }
                | Error::UnknownAnchor(_)
                | Error::TokenizerMismatch(_)
                | Error::Format(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
