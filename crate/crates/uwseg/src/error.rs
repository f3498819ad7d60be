//! Crate-wide error type.

/// Errors surfaced by tensor ops, model construction, data ingestion,
/// training, and checkpointing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or shape mismatch between tensors.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion failure (unknown mask color, size mismatch, ...).
    #[error("ingestion error: {0}")]
    Ingest(String),

    /// Checkpoint save/load failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A metric is undefined for the given inputs.
    #[error("metric error: {0}")]
    Metric(String),

    /// Training aborted on a non-finite loss value.
    #[error("non-finite loss at iteration {iter} (last lr {lr:e})")]
    NonFinite { iter: usize, lr: f32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
