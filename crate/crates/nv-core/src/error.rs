//! Error type shared across the engine.

#[derive(Debug, thiserror::Error)]
pub enum NvError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("node index {index} out of range (graph has {num_nodes} nodes)")]
    NodeOutOfRange { index: usize, num_nodes: usize },

    #[error("backward requires a forward pass on the current parameters")]
    StaleForward,

    #[error("rule release requires fresh gradients")]
    StaleGradient,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("time regression: cannot advance from {from} to {to}")]
    TimeRegression { from: f64, to: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NvError>;
