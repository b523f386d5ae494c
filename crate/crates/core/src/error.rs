use thiserror::Error;

/// Errors produced anywhere in the segmentation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("VOI out of bounds: start {start:?} + size {size:?} exceeds shape {shape:?}")]
    Bounds {
        start: [usize; 3],
        size: [usize; 3],
        shape: [usize; 3],
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("catalog error: {0}")]
    Catalog(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
