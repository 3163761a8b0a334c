use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite field value {value} at grid index {index:?}")]
    InvalidValue { index: [usize; 3], value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("capacity exceeded: sequence needs {needed} positions, model holds {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("non-finite activation in layer {layer}")]
    Numeric { layer: usize },

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("scene generation failed after {attempts} attempts (seed {seed})")]
    SceneGeneration { seed: u64, attempts: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record validation failed: {0}")]
    Validation(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
