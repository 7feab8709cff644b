use std::io;
use std::path::PathBuf;

use crate::nn::LayerId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading IDX files.
#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated file, needed {needed} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("metric error: non-finite preactivation in layer {layer}, sample {sample}, unit {unit}")]
    NonFiniteActivation {
        layer: LayerId,
        sample: usize,
        unit: usize,
    },

    #[error("metric error: probe batch too small ({batch} samples, need at least 2)")]
    ProbeBatchTooSmall { batch: usize },

    #[error("scheduler error: {0}")]
    Scheduler(String),

    #[error("load error: {0}")]
    Load(#[from] LoadError),

    #[error("non-finite loss at step {step}; diagnostic written to {}", diagnostic.display())]
    NonFiniteLoss { step: u64, diagnostic: PathBuf },

    #[error("summary error: {0}")]
    Summary(String),

    #[error("insufficient samples: observed {observed} scheduler ticks, need at least {required}")]
    InsufficientTicks { observed: usize, required: usize },

    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for this error class. Zero is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse(_) => 2,
            Error::Input(_) => 3,
            Error::NonFiniteActivation { .. } | Error::ProbeBatchTooSmall { .. } => 4,
            Error::Scheduler(_) => 5,
            Error::Load(_) => 6,
            Error::NonFiniteLoss { .. } => 7,
            Error::Summary(_) => 8,
            Error::InsufficientTicks { .. } => 9,
            Error::Json(_) | Error::Io(_) => 10,
        }
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
