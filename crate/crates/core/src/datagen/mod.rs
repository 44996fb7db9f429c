//! Ground-truth PDE trajectories, observation noise, and the MST1 dataset format.

mod generate;
mod grid;
mod integrate;
mod io;
mod rhs;

pub use generate::{generate_dataset, initial_condition, GeneratorConfig, InitialCondition};
pub use grid::{Dataset, GridSpec, Split, Trajectory};
pub use integrate::{corrupt, integrate_rk4};
pub use io::{read_dataset, sidecar_path, write_dataset, MST1_MAGIC, MST1_VERSION};
pub use rhs::{advect_rhs, burgers2d_rhs, kdv_rhs, Problem};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected MST1")]
    BadMagic([u8; 4]),
    #[error("unsupported MST1 version {0}")]
    BadVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("metadata sidecar: {0}")]
    Sidecar(String),
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
}
