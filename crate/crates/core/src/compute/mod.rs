//! Dense tensors, reverse-mode differentiation, Adam, and seeded Gaussian draws.

mod adam;
mod conv;
mod graph;
mod init;
mod nn;
mod params;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{ConvGeometry, Padding};
pub use graph::{Gradients, Graph, LeafKind, Var};
pub use init::{grow_params, init_params, Block, Init, ParamSpec};
pub use nn::{channel_bias, empty_rows, linear, mlp, mlp_specs, param, Bound};
pub use params::ParamStore;
pub use rng::Rng;
pub use tensor::Tensor;

/// Slope of every LeakyReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum ComputeError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("input leaf `{0}` is not bound")]
    Unbound(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
}
