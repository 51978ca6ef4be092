use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },

    #[error("{op}: output extent would be {extent} (< 1) for input {input:?}")]
    EmptyOutput {
        op: &'static str,
        input: [usize; 4],
        extent: isize,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("invalid architecture at layer {layer}: {reason}")]
    InvalidArchitecture { layer: usize, reason: String },

    #[error("input extent {got} is below the minimum extent {min} for this network")]
    UndersizedInput { got: usize, min: usize },

    #[error("backward requires a scalar output or a selected element, got shape {0:?}")]
    NonScalarOutput([usize; 4]),

    #[error("SURE requires known positive σ")]
    MissingSigma,

    #[error("mask is empty after {0} draws")]
    EmptyMask(usize),

    #[error("ReLU activation pattern changed along the probe direction")]
    ActivationFlip,

    #[error("psnr: identical images")]
    IdenticalImages,

    #[error("bad magic in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: String, expected: String },

    #[error("truncated file {path}: {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("unsupported PGM variant {0}")]
    UnsupportedPgm(String),

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
