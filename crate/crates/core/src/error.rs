use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not line up (parameter lengths, feature dims).
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad caller-supplied values (labels out of range, empty datasets, ...).
    #[error("input error: {0}")]
    Input(String),

    /// A round was driven with the wrong number of participants.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Should be unreachable; signals a numerical breakdown.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
