use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invariant violation on sample `{id}`: {message}")]
    Invariant { id: String, message: String },

    #[error("duplicate sample id `{id}` (positions {first} and {second})")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },

    #[error("provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },

    #[error("dataset digest mismatch: expected {expected}, got {actual}")]
    DigestMismatch { expected: String, actual: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cache corrupt at {path} line {line}: {message}")]
    CacheCorrupt {
        path: String,
        line: usize,
        message: String,
    },

    #[error("perturbation aborted: {failed} of {total} samples failed (threshold {threshold})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        threshold: f64,
    },

    #[error("audit required: {queued} rephrasings need review")]
    AuditRequired { queued: usize },

    #[error("unknown sample id `{0}` in decision stream")]
    UnknownDecisionId(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
