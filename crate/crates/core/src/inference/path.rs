use nalgebra::DMatrix;

use super::quadrature::hermite_weights;
use crate::compute::{ParamStore, Tensor};
use crate::dynamics::SdeModel;
use crate::{invalid, Result};

/// Marginal moments of a variational path at one time, all diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mu_dot: Vec<f64>,
    pub sigma_dot: Vec<f64>,
}

/// Gaussian path through encoder anchors: cubic Hermite interpolation of the
/// anchor means and of the anchor log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalPath {
    pub times: Vec<f64>,
    /// `[m, n_z]`
    pub means: Tensor,
    /// `[m, n_z]`
    pub log_vars: Tensor,
}

impl VariationalPath {
    pub fn new(times: Vec<f64>, means: Tensor, log_vars: Tensor) -> Result<Self> {
        let m = times.len();
        if m < 2 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("path needs at least two increasing anchor times");
        }
        if means.shape().len() != 2 || means.shape()[0] != m || log_vars.shape() != means.shape() {
            return invalid(format!("anchors {:?} / {:?} do not match {m} times", means.shape(), log_vars.shape()));
        }
        Ok(Self { times, means, log_vars })
    }

    pub fn n_z(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn at(&self, t: f64) -> PathPoint {
        let (w, dw) = hermite_weights(&self.times, &[t]);
        let n = self.n_z();
        let combine = |weights: &[f64], v: &Tensor| -> Vec<f64> {
            (0..n).map(|i| weights.iter().enumerate().map(|(k, c)| c * v.data()[k * n + i]).sum()).collect()
        };
        let mu = combine(&w, &self.means);
        let mu_dot = combine(&dw, &self.means);
        let lv = combine(&w, &self.log_vars);
        let lv_dot = combine(&dw, &self.log_vars);
        let sigma: Vec<f64> = lv.iter().map(|v| v.exp()).collect();
        let sigma_dot = sigma.iter().zip(&lv_dot).map(|(s, d)| s * d).collect();
        PathPoint { t, mu, sigma, mu_dot, sigma_dot }
    }
}

/// Diagonal of `B` solving `B Sigma + Sigma B^T = L L^T - Sigma_dot` for diagonal inputs.
pub fn b_diag(sigma: &[f64], sigma_dot: &[f64], ell: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != sigma_dot.len() || sigma.len() != ell.len() {
        return invalid("b_diag inputs differ in length");
    }
    if let Some(i) = sigma.iter().position(|&s| !(s > 0.0)) {
        return invalid(format!("variance {i} is not positive ({})", sigma[i]));
    }
    Ok((0..sigma.len()).map(|i| (ell[i] * ell[i] - sigma_dot[i]) / (2.0 * sigma[i])).collect())
}

/// Dense `B = vec^{-1}((Sigma (+) Sigma)^{-1} vec(L L^T - Sigma_dot))` with the Kronecker sum
/// `Sigma (x) I + I (x) Sigma`.
pub fn b_matrix(sigma: &DMatrix<f64>, sigma_dot: &DMatrix<f64>, l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n || sigma_dot.shape() != (n, n) || l.nrows() != n {
        return invalid("b_matrix needs square Sigma, Sigma_dot and L with matching rows");
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let ksum = sigma.kronecker(&eye) + eye.kronecker(sigma);
    let rhs = l * l.transpose() - sigma_dot;
    // Column-major storage is exactly the column-stacking vec().
    let v = nalgebra::DVector::from_column_slice(rhs.as_slice());
    let Some(sol) = ksum.lu().solve(&v) else {
        return invalid("Kronecker sum is singular (zero variance)");
    };
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// `mu_dot - B (z - mu) - gamma` at one path point, with diagonal `B` from [`b_diag`].
pub fn drift_residual(z: &[f64], point: &PathPoint, gamma: &[f64], ell: &[f64]) -> Result<Vec<f64>> {
    let n = point.mu.len();
    if z.len() != n || gamma.len() != n {
        return invalid("drift residual inputs differ in length");
    }
    let b = b_diag(&point.sigma, &point.sigma_dot, ell)?;
    Ok((0..n).map(|i| point.mu_dot[i] - b[i] * (z[i] - point.mu[i]) - gamma[i]).collect())
}

/// [`drift_residual`] with the learned drift and dispersion of `model`.
pub fn model_drift_residual(model: &SdeModel, params: &ParamStore, z: &[f64], point: &PathPoint) -> Result<Vec<f64>> {
    let gamma = model.drift(params, &Tensor::vector(z.to_vec()), point.t)?;
    let ell = model.dispersion(params)?;
    drift_residual(z, point, gamma.data(), &ell)
}
