//! Error type shared across the library.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue})")]
    NonPsd { min_eigenvalue: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("time {t} outside [0, 1]")]
    InvalidTime { t: f64 },

    #[error("no attenuation samples accumulated since the last reset")]
    NoSamples,

    #[error("kernel budget exceeded ({have} kernels, cap {max})")]
    CapExceeded { have: usize, max: usize },

    #[error("image dimensions {got:?} do not match expected {expected:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("missing pseudo-label file {path}")]
    MissingPseudoLabel { path: PathBuf },

    #[error("loss became non-finite at iteration {iter}")]
    NonFiniteLoss { iter: u64 },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
