use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (wrong horizon, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric argument is outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("enumeration refused: {size} trajectories exceeds cap {cap}")]
    EnumerationTooLarge { size: u128, cap: u64 },

    /// Group with all-equal rewards; has no standardization and no pair.
    #[error("degenerate group: {0}")]
    Degenerate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
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
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
