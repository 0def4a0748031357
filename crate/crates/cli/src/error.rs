use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing prerequisite: {} not found; run `aortaseg {stage}` first", path.display())]
    Missing { stage: &'static str, path: PathBuf },

    #[error("check failed: {0}")]
    Check(String),

    #[error(transparent)]
    Core(#[from] aortaseg_core::Error),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        use aortaseg_core::Error as E;
        match self {
            Self::Config(_) | Self::Core(E::Config(_) | E::Validation(_) | E::Json(_)) => 2,
            Self::Missing { .. } => 3,
            Self::Check(_) => 4,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
