use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] rgalign_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unsupported {kind} format version {found} (expected {expected}) in {path}")]
    FormatVersion {
        path: PathBuf,
        kind: String,
        found: u32,
        expected: u32,
    },
    #[error("artifact {path} does not match its recorded hash")]
    HashMismatch { path: String },
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    /// 1 for bad input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Invalid(_) | AppError::Core(rgalign_core::Error::InvalidConfig(_)) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }
}
