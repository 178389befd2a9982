use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("routing error at depth {depth}: {reason}")]
    Routing { depth: usize, reason: String },

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad user input (CLI exit code 2).
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Validation(_))
    }
}
