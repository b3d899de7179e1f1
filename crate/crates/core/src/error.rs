use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("insufficient pool: class `{class}` has {available} images, episode needs {required}")]
    InsufficientClass {
        class: String,
        available: usize,
        required: usize,
    },

    #[error("insufficient pool: {available} classes available, episode needs {required}")]
    InsufficientClasses { available: usize, required: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} (episode seed {episode_seed}): {detail}")]
    NonFiniteLoss {
        step: usize,
        episode_seed: u64,
        detail: String,
    },

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
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
