use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("feature row {index} has zero norm")]
    DegenerateFeature { index: usize },

    #[error("node {node} is isolated (zero degree)")]
    DegenerateGraph { node: usize },

    #[error("eigensolver failed to converge after {iterations} iterations")]
    Solver { iterations: usize },

    #[error("descriptor error: {0}")]
    Descriptor(String),

    #[error("missing feature file {path}; run `extract {kind} --manifest <manifest> --out <dir>` in the feature extractor first")]
    MissingFeatures { path: PathBuf, kind: &'static str },

    #[error("run error: {0}")]
    Run(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
