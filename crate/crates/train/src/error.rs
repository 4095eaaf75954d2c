use thiserror::Error;

use crate::training::TrainState;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Core(#[from] deonet_core::Error),

    #[error(transparent)]
    Nn(#[from] deonet_nn::Error),

    /// The state before the failing iteration is returned for checkpointing.
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss {
        iteration: usize,
        last_good: Box<TrainState>,
    },

    #[error("checkpoint callback failed: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
