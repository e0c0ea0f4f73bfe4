use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{0}: no interactions")]
    EmptyInput(PathBuf),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{kind} id {id} out of range (n = {n})")]
    OutOfRange { kind: &'static str, id: usize, n: usize },

    #[error("non-finite {what} at {at}")]
    NonFinite { what: &'static str, at: String },

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Best checkpoint seen before the divergence, if any.
        last_good: Option<Box<crate::model::MfModel>>,
    },

    #[error("external labels reference users unknown to the split: {0:?}")]
    MissingUsers(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}
