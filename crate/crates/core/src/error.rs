use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the discovery pipeline.
///
/// Variants are grouped so the CLI can map them onto stable exit codes
/// (config, data, gateway, replay-miss).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("record {row}: {message}")]
    MalformedRecord { row: usize, message: String },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("insufficient class population: need {needed} of label {label}, have {available}")]
    InsufficientClass {
        label: u8,
        needed: usize,
        available: usize,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("regex uses unsupported construct: {0}")]
    DialectViolation(String),

    #[error("regex syntax error: {0}")]
    RegexSyntax(String),

    #[error("no contrastive pairs fall inside the similarity band")]
    EmptyBand,

    #[error("gateway error: {0}")]
    Gateway(String),

    #[error("unparseable model output after repair: {0}")]
    Unparseable(String),

    #[error("replay cache miss for request {0}")]
    ReplayMiss(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
