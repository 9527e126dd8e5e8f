use std::io;
use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}: bad magic, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("{}: truncated payload ({detail})", path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("non-finite value in row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dangling sentence reference {id} (sentence table has {rows} rows)")]
    DanglingSentence { id: usize, rows: usize },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("{}: malformed JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("no parameters")]
    NoParameters,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("every position is masked")]
    AllMasked,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },

    #[error("empty validation split")]
    EmptyValidation,

    #[error("item {index}: {source}")]
    Item {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } => true,
            Error::Item { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
