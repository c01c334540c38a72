use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} ({detail})")]
    NonFinite { what: &'static str, detail: String },

    #[error("cannot step an episode that has already terminated")]
    EpisodeTerminated,

    #[error("grid {width}x{height} is too large for exhaustive search (max {max}x{max})")]
    OracleTooLarge {
        width: usize,
        height: usize,
        max: usize,
    },

    #[error("task index {index} out of range: valid tasks are 0..{num_tasks}")]
    TaskOutOfRange { index: usize, num_tasks: usize },

    #[error("provenance mismatch: {0}")]
    Provenance(String),

    #[error("{what} format version {found} is newer than supported version {supported}")]
    UnsupportedVersion {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("malformed {what}: {reason}")]
    Malformed { what: &'static str, reason: String },

    #[error("refusing to overwrite existing file {0} (pass --overwrite)")]
    WouldOverwrite(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
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

    /// True for failures caused by numerics (diverging losses and the like)
    /// rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
