use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(dampc::Error),
    #[error("missing artifact {}: {reason}; produce it with `dampc {producer}`", path.display())]
    Missing {
        path: PathBuf,
        reason: String,
        producer: &'static str,
    },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("runs aborted: {0}")]
    Aborted(String),
    #[error(transparent)]
    Runtime(#[from] dampc::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Runtime(dampc::Error::MissingArtifact(_)) => 3,
            CliError::Verification(_) => 4,
            CliError::Aborted(_) | CliError::Runtime(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
