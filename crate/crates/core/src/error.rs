use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: parse error: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("invalid item {item}: {message}")]
    InvalidItem { item: String, message: String },
    #[error("invalid outfit {outfit}: {message}")]
    InvalidOutfit { outfit: String, message: String },
    #[error("outfit {outfit}: dangling reference to item {item}")]
    DanglingReference { outfit: String, item: String },
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("insufficient candidates: {0}")]
    Insufficient(String),
    #[error("unknown style {0}")]
    UnknownStyle(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found:?} is not supported (expected {expected:?})")]
    Version { found: String, expected: String },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
