use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DvamError>;

#[derive(Debug, Error)]
pub enum DvamError {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph integrity: {0}")]
    GraphIntegrity(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    #[error("ingestion: {0}")]
    Ingestion(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("config: {0}")]
    Config(String),

    #[error("infinite divergence: prior assigns zero probability to code {index} at position {position}")]
    InfiniteDivergence { position: usize, index: usize },

    #[error("non-finite {term} at epoch {epoch}, batch {batch}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        term: &'static str,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DvamError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        DvamError::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        DvamError::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DvamError::Config(_) => 1,
            DvamError::NumericOverflow(_)
            | DvamError::NonFinite { .. }
            | DvamError::InfiniteDivergence { .. } => 3,
            _ => 2,
        }
    }
}
