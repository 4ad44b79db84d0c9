use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt model container: {0}")]
    CorruptContainer(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-orthonormal basis: {0}")]
    NonOrthonormal(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("infeasible box: lower > upper at index {0}")]
    InfeasibleBox(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
