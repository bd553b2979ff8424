use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("insufficient mesh resolution: {0}")]
    Resolution(String),

    #[error("degenerate triangle {element} (signed area {area:e})")]
    DegenerateElement { element: usize, area: f64 },

    #[error("source position ({x}, {y}) is outside the mesh")]
    SourceOutsideMesh { x: f64, y: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("statistics library was built against a different lead field (expected {expected}, found {found})")]
    ProvenanceMismatch { expected: String, found: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: unsupported file version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes, used by the CLI to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Numerical(_) | Error::DegenerateElement { .. } | Error::DegenerateStatistics(_) => {
                ErrorKind::Numerical
            }
            Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => ErrorKind::Io,
            _ => ErrorKind::Validation,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
