use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// The record stream does not follow the transaction schema at all.
    #[error("unresolvable record schema: {0}")]
    Schema(String),

    #[error("address {0} not found at or before the requested time")]
    AddressNotFound(String),

    #[error("transaction {0} not found")]
    TxNotFound(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training or fitting cannot proceed on the given data.
    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("missing artifact {artifact}; run `{stage}` first")]
    MissingArtifact { artifact: PathBuf, stage: &'static str },

    #[error("bad model file: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Internal(_) => 3,
            _ => 2,
        }
    }
}
