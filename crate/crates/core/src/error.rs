//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument failed a shape, range, or emptiness precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An output specification cannot be applied to the model at hand.
    #[error("invalid output spec: {0}")]
    InvalidSpec(String),

    /// A file or byte stream could not be decoded. `offset` is the byte
    /// position at which decoding stopped.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Failure reaching or decoding a remote prediction endpoint. Kept
    /// distinct from integrity mismatches: an outage is not a detection.
    #[error("transport: {0}")]
    Transport(String),
}

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
