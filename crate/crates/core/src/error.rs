use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: L2 norm {norm:e} is below 1e-12")]
    ZeroVector { norm: f64 },

    #[error("row `{id}` has norm {norm} outside tolerance {tolerance}")]
    Norm { id: String, norm: f64, tolerance: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id `{0}`")]
    UnknownId(String),

    #[error("invalid item id: {0}")]
    InvalidId(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("benchmark invariant violated: {0}")]
    InvariantViolation(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("unknown test case `{0}`")]
    UnknownCase(String),

    #[error("unknown facet `{0}`")]
    UnknownFacet(String),

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("provider does not support {0}")]
    Unsupported(&'static str),

    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("bad response: {0}")]
    BadResponse(String),

    #[error("question generator unavailable: {0}")]
    GeneratorUnavailable(String),

    #[error("generated question failed validation: {0}")]
    ValidationFailed(String),

    #[error("malformed question `{0}`: must end with '?'")]
    MalformedQuestion(String),

    #[error("prompt selector unavailable: {0}")]
    SelectorUnavailable(String),

    #[error("unparseable selector answer `{answer}` for {options} options")]
    UnparseableAnswer { answer: String, options: usize },

    #[error("no prompt registered for facet `{0}`")]
    MissingPrompt(String),

    #[error("empty image pool")]
    EmptyPool,

    #[error("cannot draw {needed} negatives for facet `{facet}` value `{value}`: only {available} eligible")]
    InsufficientNegatives {
        facet: String,
        value: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// I/O and transport failures, as opposed to validation failures.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Transport(_)
                | Error::ProviderUnavailable(_)
                | Error::GeneratorUnavailable(_)
                | Error::SelectorUnavailable(_)
                | Error::BadResponse(_)
        )
    }
}
