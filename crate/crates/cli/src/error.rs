use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] maskmamba_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
