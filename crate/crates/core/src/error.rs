use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty sample")]
    EmptySample,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },
    #[error("kernel exceeds input: {0}")]
    KernelExceedsInput(String),
    #[error("backward before forward")]
    BackwardBeforeForward,
    #[error("degenerate intensity range")]
    DegenerateIntensityRange,
    #[error("phantom out of frame: {0}")]
    PhantomOutOfFrame(String),
    #[error("divergence at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("invalid config: key '{key}': {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
