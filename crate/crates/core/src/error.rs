use std::path::PathBuf;

use kd_autograd::AutogradError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error for {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("lora error: {0}")]
    Lora(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
