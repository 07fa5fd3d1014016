use std::path::{Path, PathBuf};

/// Failures grouped by the exit status the CLI reports for them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Dataset(_) => 2,
            Error::Runtime(_) => 3,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Error::Runtime(format!("{}: {e}", path.display()))
    }

    pub fn dataset_io(path: &Path, e: impl std::fmt::Display) -> Self {
        Error::Dataset(format!("{}: {e}", path.display()))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// `path` itself when absolute, otherwise relative to `base`.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
