use serde::{Deserialize, Serialize};

use super::{DataError, GridSpec};
use crate::compute::Tensor;

/// Semi-discrete PDE right-hand sides on uniform grids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Problem {
    /// `u_t = -c u_x`, periodic, centred differences.
    Advection { velocity: f64 },
    /// `u_t + u u_x + nu u_xxx = 0`, periodic.
    Kdv { nu: f64 },
    /// Viscous Burgers in 2D with zero Dirichlet walls.
    Burgers2d { nu: f64 },
}

impl Problem {
    pub fn name(&self) -> &'static str {
        match self {
            Problem::Advection { .. } => "advection",
            Problem::Kdv { .. } => "kdv",
            Problem::Burgers2d { .. } => "burgers2d",
        }
    }

    /// Checks that `grid` has the shape this problem expects.
    pub fn check_grid(&self, grid: &GridSpec) -> Result<(), DataError> {
        let (dim, periodic, min) = match self {
            Problem::Advection { .. } => (1, true, 3),
            Problem::Kdv { .. } => (1, true, 5),
            Problem::Burgers2d { .. } => (2, false, 3),
        };
        if grid.dim() != dim || grid.periodic != periodic || grid.fields != 1 {
            return Err(DataError::Invalid(format!(
                "{} needs a {dim}D single-field {} grid",
                self.name(),
                if periodic { "periodic" } else { "Dirichlet" }
            )));
        }
        if grid.points.iter().any(|&p| p < min) {
            return Err(DataError::Invalid(format!("{} needs at least {min} points per axis", self.name())));
        }
        if dim == 2 && grid.points[0] != grid.points[1] {
            return Err(DataError::Invalid("burgers2d needs a square grid".into()));
        }
        if dim == 2 && (grid.spacing(0) - grid.spacing(1)).abs() > 1e-12 * grid.spacing(0) {
            return Err(DataError::Invalid("burgers2d needs equal spacing on both axes".into()));
        }
        Ok(())
    }

    /// Writes `du/dt` into `out`; the grid must have passed [`Problem::check_grid`].
    pub fn eval(&self, grid: &GridSpec, u: &[f64], out: &mut [f64]) {
        let dx = grid.spacing(0);
        match *self {
            Problem::Advection { velocity } => advect_into(u, velocity, dx, out),
            Problem::Kdv { nu } => kdv_into(u, nu, dx, out),
            Problem::Burgers2d { nu } => burgers_into(u, grid.points[0], nu, dx, out),
        }
    }
}

fn advect_into(u: &[f64], c: f64, dx: f64, out: &mut [f64]) {
    let n = u.len();
    let k = -c / (2.0 * dx);
    for j in 0..n {
        let up = u[(j + 1) % n];
        let um = u[(j + n - 1) % n];
        out[j] = k * (up - um);
    }
}

fn kdv_into(u: &[f64], nu: f64, dx: f64, out: &mut [f64]) {
    let n = u.len();
    let inv2 = 1.0 / (2.0 * dx);
    let k3 = nu / (dx * dx * dx);
    for j in 0..n {
        let um = u[(j + n - 1) % n];
        let up = u[(j + 1) % n];
        let upp = u[(j + 2) % n];
        out[j] = -(up - um) * inv2 * u[j] - k3 * (upp - 3.0 * up + 3.0 * u[j] - um);
    }
}

fn burgers_into(u: &[f64], n: usize, nu: f64, dx: f64, out: &mut [f64]) {
    let inv2 = 1.0 / (2.0 * dx);
    let k2 = nu / (dx * dx);
    for i in 0..n {
        for j in 0..n {
            let p = i * n + j;
            if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                out[p] = 0.0;
                continue;
            }
            let (n_, s_, w_, e_) = (u[p - n], u[p + n], u[p - 1], u[p + 1]);
            let adv = u[p] * ((s_ - n_) * inv2 + (e_ - w_) * inv2);
            let lap = (s_ - 2.0 * u[p] + n_) + (e_ - 2.0 * u[p] + w_);
            out[p] = -adv + k2 * lap;
        }
    }
}

/// Centred periodic advection right-hand side.
pub fn advect_rhs(u: &Tensor, c: f64, dx: f64) -> Result<Tensor, DataError> {
    if u.len() < 3 {
        return Err(DataError::Invalid(format!("advection needs n_y >= 3, got {}", u.len())));
    }
    let mut out = Tensor::zeros(u.shape());
    advect_into(u.data(), c, dx, out.data_mut());
    Ok(out)
}

/// Periodic KdV right-hand side with the biased third difference.
pub fn kdv_rhs(u: &Tensor, nu: f64, dx: f64) -> Result<Tensor, DataError> {
    if u.len() < 5 {
        return Err(DataError::Invalid(format!("kdv needs n_y >= 5, got {}", u.len())));
    }
    let mut out = Tensor::zeros(u.shape());
    kdv_into(u.data(), nu, dx, out.data_mut());
    Ok(out)
}

/// 2D Burgers right-hand side on an `n x n` grid; the boundary ring has zero derivative.
///
/// Accepts shape `[n, n]` or a flat `[n*n]` vector with `n*n` a perfect square.
pub fn burgers2d_rhs(u: &Tensor, nu: f64, dx: f64) -> Result<Tensor, DataError> {
    let n = match u.shape() {
        [a, b] if a == b => *a,
        [len] => {
            let r = (*len as f64).sqrt().round() as usize;
            if r * r != *len {
                return Err(DataError::Invalid(format!("{len} values do not form a square grid")));
            }
            r
        }
        s => return Err(DataError::Invalid(format!("burgers2d needs a square grid, got {s:?}"))),
    };
    if n < 3 {
        return Err(DataError::Invalid("burgers2d needs at least 3 points per axis".into()));
    }
    let mut out = Tensor::zeros(u.shape());
    burgers_into(u.data(), n, nu, dx, out.data_mut());
    Ok(out)
}
