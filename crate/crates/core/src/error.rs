use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Each variant maps onto one coarse category that the command-line front
/// end turns into an exit code (see [`Error::category`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{0}")]
    User(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

/// Coarse classification used for exit codes and machine-readable messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    User,
    Format,
    Internal,
}

impl Category {
    pub fn as_str(self) -> &'static str {
        match self {
            Category::User => "user",
            Category::Format => "format",
            Category::Internal => "internal",
        }
    }
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                index,
                source: Box::new(e),
            },
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Error::Format { .. } | Error::Version { .. } => Category::Format,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                Category::User
            }
            Error::Io { .. } => Category::Format,
            Error::Internal(_) => Category::Internal,
            Error::Layer { source, .. } => source.category(),
            Error::Shape(_) | Error::Domain(_) | Error::Config(_) | Error::User(_) => {
                Category::User
            }
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
