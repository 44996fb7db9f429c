//! Stochastic multiscale latent SDE models learned from trajectory data.

pub mod baselines;
pub mod compute;
pub mod datagen;
pub mod dynamics;
pub mod inference;
pub mod likelihood;
pub mod predict;
pub mod scales;

use compute::ComputeError;
use datagen::DataError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Invalid(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
