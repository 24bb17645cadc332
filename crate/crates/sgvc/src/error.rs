use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Mis-sized parameters, invalid channel counts, bad settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// A value outside its admissible range (for example a rate-distortion
    /// tradeoff outside the range the model was trained for).
    #[error("domain error: {0}")]
    Domain(String),
    /// Inconsistent internal state, such as stride bookkeeping gone wrong.
    #[error("internal error: {0}")]
    Internal(String),
    /// Malformed or corrupted compressed container.
    #[error("container error: {0}")]
    Container(String),
    /// Problems with user-supplied data (images, CSV files, model archives).
    #[error("data error: {0}")]
    Data(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
    pub fn container(msg: impl Into<String>) -> Self {
        Error::Container(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
