//! Crate-wide error type.

use thiserror::Error;

/// Unified error for every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A tile/patch layout parameter is out of range or inconsistent.
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    /// A raster does not satisfy the one-hot mask contract.
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    /// A network or synthesis spec is malformed.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A numeric contract was violated (non-finite values, empty sets, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A checkpoint file is missing, truncated, or from an unknown version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// A dataset directory or sample pair is malformed.
    #[error("dataset: {0}")]
    Dataset(String),
    /// A configuration file or value could not be parsed.
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
