//! Amortized variational training: segmentation, Gaussian variational paths,
//! the drift residual, the ELBO, and the staged training loop.

mod checkpoint;
mod elbo;
mod path;
mod quadrature;
mod segment;
mod train;

pub use checkpoint::{Checkpoint, ModelConfig, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use elbo::{elbo, elbo_g, read_terms, ElboBatch, ElboTerms, ElboVars, SegmentRef};
pub use path::{b_diag, b_matrix, drift_residual, model_drift_residual, PathPoint, VariationalPath};
pub use quadrature::{gauss_legendre, gauss_legendre_on, hermite_weights};
pub use segment::{segment, Segment};
pub use train::{mean_prediction_error, step_elbo, step_rng, train, LogRow, TrainConfig, TrainOutcome};
