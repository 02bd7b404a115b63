use thiserror::Error;

/// Error vocabulary shared by all modules.
///
/// The variants mirror the failure modes of the public operations; messages
/// carry the concrete numbers that violated a precondition so callers can
/// report them without re-deriving anything.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The sample is too short for the requested construction. The message
    /// names the specific inequality that failed.
    #[error("insufficient sample: {0}")]
    InsufficientSample(String),

    /// A table or scan would exceed the documented memory/size guard.
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    /// Value-set quantization found more distinct values than fit the alphabet.
    #[error("alphabet overflow: {0}")]
    OverflowAlphabet(String),

    /// Tower levels overlap or the base is unusable.
    #[error("invalid tower: {0}")]
    InvalidTower(String),

    /// An experiment configuration failed validation; `field` is the path of
    /// the offending entry.
    #[error("config error at `{field}`: {message}")]
    ConfigError { field: String, message: String },

    /// A cache entry exists but cannot be used (corruption, size mismatch).
    /// Callers recompute and warn; this is never fatal to an experiment.
    #[error("cache error: {0}")]
    CacheError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn insufficient(msg: impl Into<String>) -> Self {
        Error::InsufficientSample(msg.into())
    }
}
