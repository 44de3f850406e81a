use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes shared by every stage of the pipeline.
///
/// The variants map one-to-one onto the command-line exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Bad preset name, missing dictionary entry, invalid hyperparameter.
    #[error("configuration error: {0}")]
    Config(String),
    /// Tensor or layer shapes that do not agree.
    #[error("structural error: {0}")]
    Structural(String),
    /// A sequence that does not fit the generator's position table.
    #[error("capacity error: {0}")]
    Capacity(String),
    /// Evaluation protocol violated (e.g. methods scored on different tuples).
    #[error("protocol error: {0}")]
    Protocol(String),
    /// NaN or infinity where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
