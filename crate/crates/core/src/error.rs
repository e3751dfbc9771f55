use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error in {file}: {message}")]
    Ingestion { file: PathBuf, message: String },

    #[error("{file}:{line}: malformed record: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("index build error: {0}")]
    Build(String),

    #[error("operation requires a {expected} index")]
    Variant { expected: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("exact reward refused: {combinations} combinations exceed the cap of {cap}")]
    TooManyCombinations { combinations: u128, cap: u128 },

    #[error("non-finite gradient at step {step}: {diagnostics}")]
    NonFinite { step: u64, diagnostics: String },

    #[error("external policy error: {0}")]
    External(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
