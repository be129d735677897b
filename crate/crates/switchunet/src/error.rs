use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value-level precondition was violated.
    #[error("argument error: {0}")]
    Argument(String),
    /// A network configuration is internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// A checkpoint file does not match the network it is loaded into.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// Malformed dataset input (manifest rows, masks, label ranges).
    #[error("data error: {0}")]
    Data(String),
    /// A computation produced non-finite values.
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
