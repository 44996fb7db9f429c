use crate::compute::Tensor;
use crate::datagen::{integrate_rk4, GridSpec, Problem, Trajectory};
use crate::{invalid, Result};

/// Four-point Lagrange weights for `x` in cell `[0, 1]` with nodes at -1, 0, 1, 2.
fn cubic_weights(x: f64) -> [f64; 4] {
    [
        -x * (x - 1.0) * (x - 2.0) / 6.0,
        (x + 1.0) * (x - 1.0) * (x - 2.0) / 2.0,
        -(x + 1.0) * x * (x - 2.0) / 2.0,
        (x + 1.0) * x * (x - 1.0) / 6.0,
    ]
}

/// Sparse interpolation matrix along one axis as `(indices, weights)` per target point.
fn axis_stencils(from: &GridSpec, to: &GridSpec, axis: usize) -> Vec<([usize; 4], [f64; 4])> {
    let n = from.points[axis];
    let dx = from.spacing(axis);
    to.coords(axis)
        .iter()
        .map(|&x| {
            let s = (x - from.lo[axis]) / dx;
            let mut cell = s.floor() as i64;
            if from.periodic {
                let idx = |k: i64| k.rem_euclid(n as i64) as usize;
                let w = cubic_weights(s - cell as f64);
                ([idx(cell - 1), idx(cell), idx(cell + 1), idx(cell + 2)], w)
            } else {
                // Shift the stencil inwards near the walls; cubic accuracy is kept.
                cell = cell.clamp(1, n as i64 - 3);
                let w = cubic_weights(s - cell as f64);
                let c = cell as usize;
                ([c - 1, c, c + 1, c + 2], w)
            }
        })
        .collect()
}

/// Cubic interpolation of a field-major state from `from` to `to` (same domain).
/// Equal grids copy the state unchanged.
pub fn cubic_resample(from: &GridSpec, to: &GridSpec, u: &[f64]) -> Result<Vec<f64>> {
    if from.dim() != to.dim() || from.fields != to.fields || from.periodic != to.periodic || from.lo != to.lo || from.hi != to.hi {
        return invalid("resampling needs grids over the same domain");
    }
    if u.len() != from.n_y() {
        return invalid(format!("state has {} values, grid needs {}", u.len(), from.n_y()));
    }
    if from.points == to.points {
        return Ok(u.to_vec());
    }
    if from.points.iter().any(|&p| p < 4) {
        return invalid("cubic interpolation needs at least 4 points per axis");
    }
    let (pf, pt) = (from.points_total(), to.points_total());
    let mut out = Vec::with_capacity(to.n_y());
    for field in u.chunks(pf) {
        match from.dim() {
            1 => {
                for (idx, w) in axis_stencils(from, to, 0) {
                    out.push((0..4).map(|k| w[k] * field[idx[k]]).sum());
                }
            }
            _ => {
                let (s0, s1) = (axis_stencils(from, to, 0), axis_stencils(from, to, 1));
                let n1 = from.points[1];
                // Along axis 1 first, then axis 0.
                let mut rows = vec![0.0; from.points[0] * to.points[1]];
                for i in 0..from.points[0] {
                    for (j, (idx, w)) in s1.iter().enumerate() {
                        rows[i * to.points[1] + j] = (0..4).map(|k| w[k] * field[i * n1 + idx[k]]).sum();
                    }
                }
                for (idx, w) in &s0 {
                    for j in 0..to.points[1] {
                        out.push((0..4).map(|k| w[k] * rows[idx[k] * to.points[1] + j]).sum());
                    }
                }
            }
        }
    }
    debug_assert_eq!(out.len(), pt * to.fields);
    Ok(out)
}

/// Integrates `problem` on a coarse version of `grid` and interpolates back.
///
/// `y0` lives on the fine grid; periodic grids restrict it by subsampling,
/// Dirichlet grids by cubic interpolation. Non-finite states report the integrator step.
pub fn coarse_dns(
    problem: &Problem,
    grid: &GridSpec,
    coarse: &[usize],
    y0: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Trajectory> {
    let coarse_grid = grid.with_points(coarse)?;
    problem.check_grid(&coarse_grid)?;
    if grid.periodic {
        grid.factor_to(coarse)?;
    }
    let u0 = if grid.points == coarse_grid.points {
        y0.to_vec()
    } else if grid.periodic {
        subsample(grid, coarse, y0)?
    } else {
        cubic_resample(grid, &coarse_grid, y0)?
    };
    let run = integrate_rk4(|u, out| problem.eval(&coarse_grid, u, out), &u0, times, substeps)?;
    if coarse_grid.points == grid.points {
        return Ok(run);
    }
    let mut states = Vec::with_capacity(times.len() * grid.n_y());
    for i in 0..run.n_t() {
        states.extend(cubic_resample(&coarse_grid, grid, run.state(i))?);
    }
    Ok(Trajectory::new(times.to_vec(), Tensor::new(&[times.len(), grid.n_y()], states)?)?)
}

fn subsample(grid: &GridSpec, coarse: &[usize], y: &[f64]) -> Result<Vec<f64>> {
    let s = grid.factor_to(coarse)?;
    let mut out = Vec::new();
    for field in y.chunks(grid.points_total()) {
        match grid.dim() {
            1 => out.extend(field.iter().step_by(s)),
            _ => {
                for i in (0..grid.points[0]).step_by(s) {
                    out.extend(field[i * grid.points[1]..(i + 1) * grid.points[1]].iter().step_by(s));
                }
            }
        }
    }
    Ok(out)
}
