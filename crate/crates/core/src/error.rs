use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("row {row} has no visible positions")]
    EmptyRow { row: usize },

    #[error("segment length must be at least 1")]
    EmptySegment,

    #[error("segment contains only padding")]
    PadOnlySegment,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
