use thiserror::Error;

/// Crate-wide error type. The CLI maps `Config` to exit code 2 and
/// `Numerical` to exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or malformed input file.
    #[error("config error: {0}")]
    Config(String),

    /// A precondition on operation inputs was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// Training or evaluation produced non-finite values.
    #[error("numerical divergence: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
