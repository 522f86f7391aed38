use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error in record '{id}': {message}")]
    Schema { id: String, message: String },

    #[error("embedding file error: {0}")]
    Embedding(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("domain violation: {0}")]
    Domain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate evidence at token {token}: every state has zero likelihood")]
    DegenerateEvidence { token: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),
}

impl Error {
    /// Short machine-readable tag used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::Embedding(_) => "embedding",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dimension { .. } => "dimension",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "non_finite",
            Error::DegenerateEvidence { .. } => "degenerate_evidence",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
