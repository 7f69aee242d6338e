use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A binary payload failed validation while being parsed.
    #[error("{file}: {reason} (byte offset {offset}{})", record.map(|r| format!(", record {r}")).unwrap_or_default())]
    Corrupt {
        file: String,
        offset: u64,
        record: Option<usize>,
        reason: String,
    },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// True for failures caused by the filesystem rather than by input content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
