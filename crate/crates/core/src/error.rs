//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Spatial or structural shapes of two inputs disagree.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An operation that needs at least one sample received none.
    #[error("empty sample: {0}")]
    EmptySample(String),

    /// A value lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough inputs to run the requested procedure.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A non-finite quantity surfaced during training.
    #[error("training fault in {component} at iteration {iteration}")]
    TrainingFault { component: String, iteration: u64 },

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted file does not match the expected format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
