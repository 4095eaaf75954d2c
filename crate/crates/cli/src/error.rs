use thiserror::Error;

use crate::container::ContainerError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Stale(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<deonet_core::Error> for CliError {
    fn from(e: deonet_core::Error) -> Self {
        match e {
            deonet_core::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<deonet_train::Error> for CliError {
    fn from(e: deonet_train::Error) -> Self {
        match e {
            deonet_train::Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            deonet_train::Error::Core(inner) => inner.into(),
            deonet_train::Error::NonFiniteLoss { .. } => CliError::Solver(e.to_string()),
            deonet_train::Error::Nn(_) | deonet_train::Error::Checkpoint(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<deonet_nn::Error> for CliError {
    fn from(e: deonet_nn::Error) -> Self {
        CliError::Io(format!("model: {e}"))
    }
}

impl From<ContainerError> for CliError {
    fn from(e: ContainerError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(format!("json: {e}"))
    }
}
