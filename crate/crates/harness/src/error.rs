use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Core(#[from] rlv_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit code: 2 config, 3 artifact, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Artifact(_) => 3,
            HarnessError::BackendUnavailable(_) | HarnessError::Protocol(_) => 4,
            HarnessError::Core(rlv_core::Error::InvalidArgument(_)) => 2,
            HarnessError::Core(rlv_core::Error::Backend(_)) => 4,
            // A diverged run leaves no usable artifact.
            HarnessError::Core(rlv_core::Error::Numeric(_)) => 3,
        }
    }

    pub fn artifact(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Artifact(format!("{}: {e}", path.display()))
    }
}
