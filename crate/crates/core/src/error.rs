use std::io;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller supplied arguments outside an operation's contract.
    #[error("invalid input: {0}")]
    Input(String),
    /// A configuration failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A sequence is longer than the positional tables can address.
    #[error("sequence of {frames} frames exceeds positional capacity {capacity}")]
    Capacity { frames: usize, capacity: usize },
    /// A binary file did not match its declared layout.
    #[error("format error: {0}")]
    Format(String),
    /// Non-finite values or divergence.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Profile with zero total mass.
    #[error("degenerate importance profile: total mass is zero")]
    DegenerateProfile,
    /// Rank correlation with a constant input.
    #[error("correlation undefined: zero rank variance")]
    UndefinedCorrelation,
    #[error("storage error: {0}")]
    Storage(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
