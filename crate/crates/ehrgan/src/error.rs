use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Dimension or shape mismatch in a tensor operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid argument or configuration value.
    #[error("invalid: {0}")]
    Invalid(String),

    /// Config file parse failure.
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    /// Corpus file parse failure.
    #[error("corpus line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    /// Binary artifact (checkpoint / embedding) format problem.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Artifact was produced by an incompatible code or config version.
    #[error("version mismatch: {0}")]
    Mismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
