use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): extent must be positive and finite")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("cannot parse head variant `{token}`: {reason}")]
    VariantParse { token: String, reason: String },

    #[error("training diverged at epoch {epoch}: mean loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("malformed {what} at line {line}: {reason}")]
    Format {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error("digest mismatch for {path}: expected {expected}, found {found}")]
    DigestMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("invalid config file: {0}")]
    ConfigFile(String),
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::ConfigFile(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::ConfigFile(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
