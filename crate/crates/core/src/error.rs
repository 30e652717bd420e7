use std::path::PathBuf;

/// Errors raised by the training toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("cannot enqueue {batch} keys into a queue of capacity {capacity}")]
    Capacity { batch: usize, capacity: usize },

    #[error("not ready: {0}")]
    NotReady(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(
        "non-finite loss in {phase} at epoch {epoch}, step {step} (lr {lr}): {components}"
    )]
    NonFinite {
        phase: String,
        epoch: usize,
        step: usize,
        lr: f64,
        components: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed checkpoint: {0}")]
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
