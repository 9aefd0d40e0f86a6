use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI's distinct exit codes:
/// `Config` for bad configuration or arguments, `Data`/`Container` for data
/// and artifact problems, `Divergence` for aborted optimization runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("data: {0}")]
    Data(String),

    #[error("corrupt container: {0}")]
    Container(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
