use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid hyperparameters or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A precondition of an operation was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Malformed or incomplete input data.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A non-finite value showed up where it must not.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Reference MSE is zero, so a percentage change is undefined.
    #[error("degenerate reference: reference MSE is zero")]
    DegenerateReference,

    /// Prediction equals the truth exactly, so 1/MSE is infinite.
    #[error("infinite score: prediction matches the truth exactly")]
    InfiniteScore,

    /// Broken binary container or text metadata.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
