//! Error taxonomy shared by every module.
//!
//! Three failure classes matter to callers: bad caller input, malformed
//! files, and non-finite arithmetic. The CLI maps them to distinct exit
//! codes, so the distinction is part of the public contract.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied values violate a precondition (shape mismatch,
    /// invalid configuration, out-of-range argument).
    #[error("input error: {0}")]
    Input(String),

    /// A file on disk does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// Arithmetic produced NaN/Inf or an otherwise unusable value.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
