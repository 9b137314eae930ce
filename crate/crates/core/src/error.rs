use std::path::PathBuf;

use pixar_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("character {ch:?} at offset {offset} is not in the glyph atlas")]
    Unrenderable { ch: char, offset: usize },
    #[error("{what}, line {line}: {msg}")]
    Parse { what: String, line: usize, msg: String },
    #[error("{0}")]
    InvalidInput(String),
    #[error("sequence of {needed} patches exceeds the window of {window}")]
    WindowOverflow { needed: usize, window: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format { what, msg: msg.into() }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Unrenderable { .. } => "unrenderable",
            Error::Parse { .. } => "parse",
            Error::InvalidInput(_) => "invalid-input",
            Error::WindowOverflow { .. } => "window-overflow",
            Error::NonFinite(_) => "non-finite",
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Tensor(_) => "tensor",
        }
    }

    /// True for failures caused by diverging numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
