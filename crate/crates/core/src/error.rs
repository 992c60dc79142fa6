//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A primitive was applied to tensors whose shapes it cannot accept.
    Shape { primitive: &'static str, detail: String },
    /// A computation produced NaN or Inf.
    NonFinite { context: String },
    /// A linear solve or factorization met a (numerically) singular matrix.
    Singular { context: String },
    /// An iterative routine ran out of its iteration budget.
    NoConvergence { context: String },
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// A persisted artifact is malformed or incomplete.
    Artifact(String),
    Io(std::io::Error),
    Json(serde_json::Error),
    Csv(csv::Error),
}

impl Error {
    pub fn shape(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { primitive, detail: detail.into() }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn artifact(msg: impl Into<String>) -> Self {
        Error::Artifact(msg.into())
    }

    /// Io error carrying the offending path; plain `fs` errors don't name it.
    pub fn io_at(path: &std::path::Path, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { primitive, detail } => {
                write!(f, "shape error in `{primitive}`: {detail}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Singular { context } => write!(f, "singular matrix in {context}"),
            Error::NoConvergence { context } => write!(f, "no convergence: {context}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Artifact(msg) => write!(f, "bad artifact: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::Csv(e) => write!(f, "csv error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            Error::Csv(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}
