use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid rank {rank}: must satisfy 1 <= r <= {max}")]
    InvalidRank { rank: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown task {0}")]
    UnknownTask(u32),

    #[error("task {0} is not frozen")]
    TaskNotFrozen(u32),

    #[error("task {0} has no modulation set")]
    NoModulation(u32),

    #[error("invalid layer index {index} (model has {count} layers)")]
    InvalidLayer { index: usize, count: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("task {task} no longer reproduces its replay table (max |diff| {max_abs_diff:e})")]
    Forgetting { task: u32, max_abs_diff: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
