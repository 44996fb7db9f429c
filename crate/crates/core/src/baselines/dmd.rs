use nalgebra::{DMatrix, DVector};

use crate::compute::Tensor;
use crate::{invalid, Result};

/// Reduced linear operator `x_{k+1} ~ U A U^T x_k`.
///
/// Modes are the projected ones, `U W` with `W` the eigenvectors of `A`;
/// rollouts use `U` and `A` directly, which is the same expansion.
#[derive(Clone, Debug, PartialEq)]
pub struct DmdModel {
    pub rank: usize,
    pub a_tilde: DMatrix<f64>,
    /// POD basis of the input snapshots `[n_y, rank]`.
    pub basis: DMatrix<f64>,
    pub lambda: f64,
    /// Set when the requested rank had to shrink.
    pub warning: Option<String>,
}

impl DmdModel {
    /// Eigenvalues of the reduced operator as `(re, im)`, sorted by decreasing modulus.
    pub fn eigenvalues(&self) -> Vec<(f64, f64)> {
        let mut ev: Vec<(f64, f64)> = self.a_tilde.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
        ev.sort_by(|a, b| b.0.hypot(b.1).total_cmp(&a.0.hypot(a.1)));
        ev
    }
}

/// DMD from one snapshot matrix `x: [n_y, n_t]`.
pub fn dmd_fit(x: &DMatrix<f64>, r: usize, lambda: f64) -> Result<DmdModel> {
    if x.ncols() < 2 {
        return invalid("DMD needs at least two snapshots");
    }
    let n = x.ncols();
    dmd_fit_pairs(&x.columns(0, n - 1).into_owned(), &x.columns(1, n - 1).into_owned(), r, lambda)
}

/// DMD from paired snapshots `x2[:, k] ~ F(x1[:, k])`, e.g. pooled over trajectories.
pub fn dmd_fit_pairs(x1: &DMatrix<f64>, x2: &DMatrix<f64>, r: usize, lambda: f64) -> Result<DmdModel> {
    if x1.shape() != x2.shape() || x1.ncols() == 0 {
        return invalid("DMD snapshot pairs must be non-empty with matching shapes");
    }
    if r == 0 || r > x1.nrows().min(x1.ncols()) {
        return invalid(format!("DMD rank {r} must lie in 1..=min(n_y, pairs) = {}", x1.nrows().min(x1.ncols())));
    }
    if !(lambda >= 0.0) {
        return invalid("Tikhonov parameter must be non-negative");
    }
    let svd = x1.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = svd.singular_values[order[0]];
    let tol = s_max * f64::EPSILON * x1.nrows().max(x1.ncols()) as f64;
    let available = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    let mut warning = None;
    let rank = if available < r {
        warning = Some(format!("snapshot rank {available} is below requested DMD rank {r}; using {available}"));
        available
    } else {
        r
    };
    if rank == 0 {
        return invalid("DMD snapshots are identically zero");
    }
    let keep = &order[..rank];
    let ur = DMatrix::from_fn(x1.nrows(), rank, |i, j| u[(i, keep[j])]);
    let vr = DMatrix::from_fn(x1.ncols(), rank, |i, j| vt[(keep[j], i)]);
    let gain = DVector::from_iterator(
        rank,
        keep.iter().map(|&k| {
            let s = svd.singular_values[k];
            s / (s * s + lambda)
        }),
    );
    let mut a_tilde = ur.transpose() * x2 * vr;
    for (j, g) in gain.iter().enumerate() {
        a_tilde.column_mut(j).scale_mut(*g);
    }
    Ok(DmdModel { rank, a_tilde, basis: ur, lambda, warning })
}

/// Rollout `[n_steps + 1, n_y]` from `y0`; the first row is the lifted projection of `y0`.
pub fn dmd_predict(model: &DmdModel, y0: &[f64], n_steps: usize) -> Result<Tensor> {
    if y0.len() != model.basis.nrows() {
        return invalid(format!("state has {} values, DMD model needs {}", y0.len(), model.basis.nrows()));
    }
    let mut z = model.basis.tr_mul(&DVector::from_column_slice(y0));
    let mut out = Vec::with_capacity((n_steps + 1) * y0.len());
    for k in 0..=n_steps {
        if k > 0 {
            z = &model.a_tilde * z;
        }
        out.extend((&model.basis * &z).iter());
    }
    Ok(Tensor::new(&[n_steps + 1, y0.len()], out)?)
}
