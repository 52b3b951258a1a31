use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("invalid phantom spec: {0}")]
    Phantom(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("binarization failed: {0}")]
    Binarize(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("diverged at iteration {iteration}: {detail}")]
    Diverged {
        iteration: usize,
        detail: String,
        /// Last output volume whose values were all finite.
        last_finite: Option<Box<crate::volume::Volume3D>>,
    },

    #[error("config line {line}: key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("format: expected version {expected}, found version {found} in {path}")]
    VersionMismatch {
        expected: u32,
        found: u32,
        path: PathBuf,
    },

    #[error("format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category used on the command line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::Phantom(_) => "phantom",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::StaleCache(_) => "cache",
            Error::Binarize(_) => "binarize",
            Error::Metric(_) => "metric",
            Error::Diverged { .. } => "diverged",
            Error::Config { .. } => "config",
            Error::VersionMismatch { .. } => "version",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
