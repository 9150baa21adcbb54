//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Empty corpus, token stream too short, vocab mismatch, bad config...
    Invalid(String),
    /// Non-finite loss or gradients during training.
    Divergence(String),
    /// Checkpoint version/corruption problems.
    Checkpoint(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Invalid(msg) => write!(f, "{msg}"),
            Error::Divergence(msg) => write!(f, "divergence: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint: {msg}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
