use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument or malformed data supplied by the caller.
    #[error("validation error: {0}")]
    Validation(String),
    /// Incompatible configuration (channel counts, image sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Operation not allowed in the episode's current state.
    #[error("state error: {0}")]
    State(String),
    #[error("scene generation failed: {0}")]
    Generation(String),
    #[error("training diverged at step {step} (sample seed {sample_seed}): {detail}")]
    NonFiniteLoss {
        step: u64,
        sample_seed: u64,
        detail: String,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("image error: {0}")]
    Image(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by caller input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config(_) | Error::State(_)
        )
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parameter array `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}
