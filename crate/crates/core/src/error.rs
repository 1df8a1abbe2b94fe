//! Error taxonomy shared by every module in the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The variants map onto process exit codes in the CLI: [`Error::Usage`]
/// exits with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or kernel shapes are incompatible for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// An invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs are outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// The API was called incorrectly (wrong argument structure, not data).
    #[error("usage error: {0}")]
    Usage(String),

    /// A file or byte stream does not match the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
