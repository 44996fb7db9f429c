//! Reference surrogates compared against the latent SDE: coarse DNS, DMD and POD-SINDy.

mod coarse;
mod dmd;
mod sindy;

pub use coarse::{coarse_dns, cubic_resample};
pub use dmd::{dmd_fit, dmd_fit_pairs, dmd_predict, DmdModel};
pub use sindy::{
    central_derivative, library, library_width, pod_basis, sindy_fit, sindy_predict, stlsq, SindyModel, SindyRollout,
    Stlsq,
};

use nalgebra::DMatrix;

use crate::datagen::Trajectory;

/// Columns of `X = [x_0, ..., x_{n_t-1}]` from a trajectory's rows.
pub fn snapshot_matrix(traj: &Trajectory) -> DMatrix<f64> {
    DMatrix::from_row_slice(traj.n_t(), traj.n_y(), traj.states.data()).transpose()
}
