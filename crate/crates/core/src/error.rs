use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ply parse error at line {line}: {msg}")]
    Ply { line: usize, msg: String },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("no object could be placed in the scene")]
    NoObjectsPlaced,

    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),

    #[error("patch size {patch} does not divide image {width}x{height}")]
    PatchSize {
        width: usize,
        height: usize,
        patch: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config mismatch in fields: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: manifest {expected:08x}, payload {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("too many unreadable scenes: {skipped} of {total}")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
