use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("division by {value:e} (below epsilon {eps:e}) in {op}")]
    DivisionByZero { op: &'static str, value: f64, eps: f64 },

    #[error("malformed {kind}: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error("checkpoint does not match architecture: {0}")]
    Architecture(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn format(kind: &'static str, detail: impl Into<String>) -> Self {
        Error::Format { kind, detail: detail.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
