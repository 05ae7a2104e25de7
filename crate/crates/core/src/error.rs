use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: expected header `{expected}`, found `{found}`")]
    BadHeader {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("no observations in any channel for user {0}")]
    EmptyGrid(String),

    #[error("minute index mismatch: {0}")]
    IndexMismatch(String),

    #[error("feature width mismatch: model expects {expected}, input has {found}")]
    FeatureWidth { expected: usize, found: usize },

    #[error("no training examples")]
    NoTrainingData,

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("config hash mismatch for {path}: artifact {found}, current {expected} (use --force to override)")]
    ConfigHashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("malformed artifact {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn malformed(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
