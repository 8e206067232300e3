use std::io;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} bytes of payload, found {found}")]
    Length { expected: usize, found: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("numeric error at stage {stage}: {detail}")]
    Numeric { stage: usize, detail: String },
    #[error("training error: {0}")]
    Training(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("refused: {0}")]
    Refused(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Short stable name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Length { .. } => "length",
            Error::Data(_) => "data",
            Error::Degenerate(_) => "degenerate",
            Error::Argument(_) => "argument",
            Error::Numeric { .. } => "numeric",
            Error::Training(_) => "training",
            Error::Usage(_) => "usage",
            Error::Refused(_) => "refused",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn argument(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
