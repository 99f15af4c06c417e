//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input tensor or map had the wrong shape.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A non-finite value appeared during computation.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// An argument was outside its documented domain.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration was rejected before any work started.
    #[error("rejected configuration: {0}")]
    Config(String),

    /// Two parameter sets or prompt states do not share structure.
    #[error("structural mismatch: {0}")]
    Structural(String),

    /// A loss value had no gradient path to the prompt parameters.
    #[error("detached prompt: {0}")]
    DetachedPrompt(String),

    /// Checkpoint or prompt-state file could not be parsed.
    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
