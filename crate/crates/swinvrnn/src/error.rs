//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Grid geometry does not admit the requested operation.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Archive content does not match the variable catalog.
    #[error("catalog mismatch: {0}")]
    CatalogMismatch(String),

    /// Ingested data is malformed (non-finite values, bad layout, broken file).
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// A statistic required by the pipeline is degenerate.
    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    /// Invalid run or model configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shapes do not match an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A forward or training pass produced non-finite values.
    #[error("numerical divergence at step {step}: {context}")]
    Divergence { step: usize, context: String },

    /// A latent distribution violates its structural invariants.
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    /// On-disk artifact (cache, checkpoint, forecast) is malformed.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
