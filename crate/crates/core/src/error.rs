use std::path::PathBuf;

use thiserror::Error;

use crate::backbone::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("mixing coefficient {value} at index {index} lies outside [0, 1]")]
    LambdaRange { index: usize, value: f64 },
    #[error("recognizability state is not initialized")]
    UrUninitialized,
    #[error("label {label} at batch index {index} is not a class in 0..{classes}")]
    InvalidLabel { index: usize, label: i64, classes: usize },
    #[error("top_k {top_k} outside 1..={batch}")]
    TopK { top_k: usize, batch: usize },
    #[error("probe {probe} has identity {id} which is absent from the gallery")]
    MissingIdentity { probe: usize, id: i64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config line {line}: key `{key}`: {msg}")]
    Config { line: usize, key: String, msg: String },
    #[error("non-finite loss at iteration {t}")]
    NonFiniteLoss { t: u64 },
    #[error("{0}")]
    Invalid(String),
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
