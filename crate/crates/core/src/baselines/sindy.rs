use nalgebra::{DMatrix, DVector};

use crate::compute::Tensor;
use crate::datagen::Trajectory;
use crate::{invalid, Result};

/// Latent polynomial ODE `dz/dt = Theta(z) Xi` on a POD basis.
#[derive(Clone, Debug, PartialEq)]
pub struct SindyModel {
    /// `[n_y, r]` with orthonormal columns.
    pub basis: DMatrix<f64>,
    pub order: usize,
    /// `[library_width, r]`
    pub xi: DMatrix<f64>,
    pub threshold: f64,
    /// False when thresholding had not settled after the sweep limit.
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SindyRollout {
    /// Lifted states up to the last finite, bounded step.
    pub trajectory: Trajectory,
    pub blew_up: bool,
}

/// Outcome of sequentially thresholded least squares.
#[derive(Clone, Debug, PartialEq)]
pub struct Stlsq {
    pub xi: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

const MAX_SWEEPS: usize = 20;

/// Leading `r` left singular vectors of `x: [n_y, n_snapshots]`.
pub fn pod_basis(x: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    if r == 0 || r > x.nrows().min(x.ncols()) {
        return invalid(format!("POD rank {r} must lie in 1..=min(n_y, snapshots)"));
    }
    let svd = x.clone().svd(true, false);
    let u = svd.u.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    Ok(DMatrix::from_fn(x.nrows(), r, |i, j| u[(i, order[j])]))
}

/// Number of monomials of degree `<= order` in `r` variables.
pub fn library_width(r: usize, order: usize) -> usize {
    match order {
        1 => 1 + r,
        _ => 1 + r + r * (r + 1) / 2,
    }
}

/// Library rows `[1, z_i, z_i z_j (i <= j)]` for each row of `z: [n, r]`.
pub fn library(z: &DMatrix<f64>, order: usize) -> DMatrix<f64> {
    let r = z.ncols();
    let mut out = DMatrix::zeros(z.nrows(), library_width(r, order));
    for k in 0..z.nrows() {
        let row = library_row(z.row(k).iter().copied().collect::<Vec<_>>().as_slice(), order);
        out.row_mut(k).copy_from_slice(&row);
    }
    out
}

fn library_row(z: &[f64], order: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(library_width(z.len(), order));
    row.push(1.0);
    row.extend_from_slice(z);
    if order == 2 {
        for i in 0..z.len() {
            for j in i..z.len() {
                row.push(z[i] * z[j]);
            }
        }
    }
    row
}

/// Time derivative of the rows of `z: [n_t, r]`: second-order central
/// differences inside, second-order one-sided at the ends (first order for two samples).
pub fn central_derivative(z: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
    let n = z.nrows();
    if n < 2 || !(dt > 0.0) {
        return invalid("derivative needs at least two samples and dt > 0");
    }
    let mut d = DMatrix::zeros(n, z.ncols());
    if n == 2 {
        let row = (z.row(1) - z.row(0)) / dt;
        d.row_mut(0).copy_from(&row);
        d.row_mut(1).copy_from(&row);
        return Ok(d);
    }
    for k in 1..n - 1 {
        d.row_mut(k).copy_from(&((z.row(k + 1) - z.row(k - 1)) / (2.0 * dt)));
    }
    d.row_mut(0).copy_from(&((z.row(0) * -3.0 + z.row(1) * 4.0 - z.row(2)) / (2.0 * dt)));
    d.row_mut(n - 1).copy_from(&((z.row(n - 1) * 3.0 - z.row(n - 2) * 4.0 + z.row(n - 3)) / (2.0 * dt)));
    Ok(d)
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    svd.solve(b, tol).expect("both factors were computed")
}

/// Sequentially thresholded least squares for `theta Xi ~ dz`, one column per target.
///
/// Each sweep zeroes coefficients with magnitude below `tau` and refits the rest;
/// iteration stops when the support no longer changes.
pub fn stlsq(theta: &DMatrix<f64>, dz: &DMatrix<f64>, tau: f64) -> Stlsq {
    let p = theta.ncols();
    let mut xi = DMatrix::zeros(p, dz.ncols());
    let mut converged = true;
    let mut max_sweeps = 0;
    for c in 0..dz.ncols() {
        let target = dz.column(c).into_owned();
        let mut active: Vec<usize> = (0..p).collect();
        let mut coef = vec![0.0; p];
        let mut settled = false;
        let mut sweeps = 0;
        while sweeps < MAX_SWEEPS {
            sweeps += 1;
            coef = vec![0.0; p];
            if !active.is_empty() {
                let sub = theta.select_columns(active.iter());
                let sol = lstsq(&sub, &target);
                for (k, &j) in active.iter().enumerate() {
                    coef[j] = sol[k];
                }
            }
            let next: Vec<usize> = active.iter().copied().filter(|&j| coef[j].abs() >= tau).collect();
            if next == active {
                settled = true;
                break;
            }
            active = next;
        }
        if !settled {
            // Zero what the last fit left below threshold so the result is still sparse.
            for j in 0..p {
                if !active.contains(&j) {
                    coef[j] = 0.0;
                }
            }
        }
        converged &= settled;
        max_sweeps = max_sweeps.max(sweeps);
        xi.column_mut(c).copy_from_slice(&coef);
    }
    Stlsq { xi, sweeps: max_sweeps, converged }
}

/// POD-SINDy fit on trajectories sampled every `dt`.
pub fn sindy_fit(trajs: &[&Trajectory], r: usize, order: usize, tau: f64, dt: f64) -> Result<SindyModel> {
    if !(1..=2).contains(&order) {
        return invalid(format!("SINDy polynomial order must be 1 or 2, got {order}"));
    }
    if trajs.is_empty() {
        return invalid("SINDy needs at least one trajectory");
    }
    let x = DMatrix::from_columns(
        &trajs.iter().flat_map(|t| (0..t.n_t()).map(|i| DVector::from_column_slice(t.state(i)))).collect::<Vec<_>>(),
    );
    let basis = pod_basis(&x, r)?;
    let (mut thetas, mut dzs) = (Vec::new(), Vec::new());
    for t in trajs {
        let y = DMatrix::from_row_slice(t.n_t(), t.n_y(), t.states.data());
        let z = y * &basis;
        dzs.push(central_derivative(&z, dt)?);
        thetas.push(library(&z, order));
    }
    let stack = |ms: &[DMatrix<f64>]| {
        let rows: usize = ms.iter().map(|m| m.nrows()).sum();
        let mut out = DMatrix::zeros(rows, ms[0].ncols());
        let mut at = 0;
        for m in ms {
            out.rows_mut(at, m.nrows()).copy_from(m);
            at += m.nrows();
        }
        out
    };
    let fit = stlsq(&stack(&thetas), &stack(&dzs), tau);
    Ok(SindyModel { basis, order, xi: fit.xi, threshold: tau, converged: fit.converged })
}

impl SindyModel {
    /// Latent time derivative at `z`.
    pub fn rhs(&self, z: &[f64]) -> Vec<f64> {
        let row = DVector::from_vec(library_row(z, self.order));
        (self.xi.transpose() * row).iter().copied().collect()
    }
}

/// RK4 rollout with `substeps` steps between outputs, lifted through the basis.
///
/// Stops at the first non-finite latent state or one exceeding `1e6` times
/// the initial latent norm (plus one), returning the prefix with `blew_up` set.
pub fn sindy_predict(model: &SindyModel, y0: &[f64], times: &[f64], substeps: usize) -> Result<SindyRollout> {
    let n_y = model.basis.nrows();
    if y0.len() != n_y || times.is_empty() || substeps == 0 {
        return invalid("SINDy rollout needs a matching state, times and substeps");
    }
    let mut z: Vec<f64> = model.basis.tr_mul(&DVector::from_column_slice(y0)).iter().copied().collect();
    let bound = 1e6 * (1.0 + z.iter().map(|v| v * v).sum::<f64>().sqrt());
    let lift = |z: &[f64]| &model.basis * DVector::from_column_slice(z);
    let mut states: Vec<f64> = lift(&z).iter().copied().collect();
    let mut kept = 1;
    let mut blew_up = false;
    'outer: for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for _ in 0..substeps {
            let axpy = |a: &[f64], s: f64, b: &[f64]| a.iter().zip(b).map(|(x, y)| x + s * y).collect::<Vec<_>>();
            let k1 = model.rhs(&z);
            let k2 = model.rhs(&axpy(&z, 0.5 * h, &k1));
            let k3 = model.rhs(&axpy(&z, 0.5 * h, &k2));
            let k4 = model.rhs(&axpy(&z, h, &k3));
            for i in 0..z.len() {
                z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm > bound {
                blew_up = true;
                break 'outer;
            }
        }
        states.extend(lift(&z).iter());
        kept += 1;
    }
    let trajectory = Trajectory::new(times[..kept].to_vec(), Tensor::new(&[kept, n_y], states)?)?;
    Ok(SindyRollout { trajectory, blew_up })
}
