//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad or unparseable configuration; the message names the offending key.
    #[error("config error: {0}")]
    Config(String),

    /// A value-level invariant was violated.
    #[error("validation error: {0}")]
    Validation(String),

    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Unknown or untrained domain id.
    #[error("domain error: {0}")]
    Domain(String),

    /// The synthetic generator could not satisfy a placement constraint.
    #[error("generation error: {0}")]
    Generation(String),

    /// Training diverged or produced non-finite values.
    #[error("training error: {0}")]
    Training(String),

    /// Checkpoint exists but cannot be used with the current setup.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// Stored digest does not match the payload.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// On-disk dataset/report layout is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
