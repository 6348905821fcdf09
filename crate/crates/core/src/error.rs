use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::adcore::AdError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
}

impl Error {
    /// Wraps an IO error with the path it concerns.
    pub fn at(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
