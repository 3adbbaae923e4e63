use std::fmt;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("{dim} = {size} is not a power of two")]
    NotPowerOfTwo { dim: &'static str, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Value outside an operation's domain (log of a non-positive number, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular: {0}")]
    Singular(String),

    /// NaN or Inf reached a loss or activation during training.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("malformed data at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }

    pub(crate) fn shape(left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
