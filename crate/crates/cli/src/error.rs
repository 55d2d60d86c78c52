use flowgrpo_core::Error as CoreError;

/// Command failure, mapped to the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    /// Core errors raised while interpreting configuration values.
    pub fn from_config(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(m) => CliError::Config(m),
            other => other.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence(m) => CliError::Divergence(m),
            CoreError::Io(e) => CliError::Io(e.to_string()),
            e @ (CoreError::CheckpointVersion(_)
            | CoreError::CheckpointTruncated(_)
            | CoreError::CheckpointShape(_)) => CliError::Io(e.to_string()),
            CoreError::InvalidArgument(m) => CliError::Config(m),
            CoreError::Shape(m) => CliError::Divergence(format!("shape error: {m}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
