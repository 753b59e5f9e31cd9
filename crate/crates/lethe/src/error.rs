//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any lethe component.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An index (token id, span offset, label token) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A configuration value violates its invariants.
    #[error("invalid config: {0}")]
    Config(String),

    /// A contract precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward/backward pass or metric produced NaN/Inf.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Training diverged (NaN loss) at the given epoch.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// Entity pools that must be disjoint share entries.
    #[error("pool disjointness violated: {0}")]
    Disjointness(String),

    /// A template slot type has no entries in the pool.
    #[error("pool coverage: {0}")]
    Coverage(String),

    /// A pipeline stage was requested before its prerequisite completed.
    #[error("missing prerequisite stage '{0}'")]
    MissingStage(String),

    /// Checkpoint/artifact container is malformed or version-incompatible.
    #[error("invalid artifact: {0}")]
    Artifact(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
