use thiserror::Error;

/// Errors raised by the replay, network, sampler, agent and environment layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A value outside its legal domain (negative priority, wrong dimension, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// An index that does not refer to an occupied slot.
    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },

    /// An operation that is illegal in the current state (empty buffer, step after done, ...).
    #[error("state error: {0}")]
    State(String),

    /// Matrix or vector shapes that do not line up.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    /// A NaN or infinity showed up in a gradient, loss or parameter.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
