use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("scene spec infeasible: {0}")]
    SpecInfeasible(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: geometry error: {msg}")]
    Geometry {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("detection {index} has no {mode} box")]
    MissingBox { index: usize, mode: &'static str },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("loss diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    DivergedLoss {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

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
