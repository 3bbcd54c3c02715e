use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on {axes}: {detail}")]
    Dimension {
        op: &'static str,
        axes: String,
        detail: String,
    },

    #[error("tape: {0}")]
    Tape(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stale inner trajectory: recorded against parameter version {recorded}, current is {current}")]
    StaleTrajectory { recorded: u64, current: u64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no results found in {}", .0.display())]
    NoResults(PathBuf),

    #[error("io error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {}: {reason}", .path.display())]
    Parse { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, axes: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            axes: axes.into(),
            detail: detail.into(),
        }
    }

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

    /// True for errors caused by user configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
