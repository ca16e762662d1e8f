use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid size: {0}")]
    InvalidSize(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("token count {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("QR decomposition failed: {0}")]
    DecompositionFailed(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid diffusion step: {0}")]
    InvalidStep(String),

    #[error("invalid condition: class {class} (model has {num_classes} classes)")]
    InvalidCondition { class: usize, num_classes: usize },

    #[error("invalid hook: layer {layer} (depth {depth})")]
    InvalidHook { layer: usize, depth: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unsupported guidance method: {0}")]
    UnsupportedMethod(String),

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
