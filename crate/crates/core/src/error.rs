use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gradient requested for non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("no weights registered for band `{0}`")]
    MissingWeights(String),

    #[error("class index {index} out of range for {classes} classes")]
    UnknownClass { index: usize, classes: usize },

    #[error("contrastive loss needs at least two distinct device labels")]
    SingleDevice,

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
