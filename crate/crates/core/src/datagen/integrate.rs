use super::{DataError, Trajectory};
use crate::compute::{Rng, Tensor};

/// Classical RK4 with `substeps` equal steps between consecutive output times.
///
/// `times` must be uniformly spaced; `u0` is the state at `times[0]`.
pub fn integrate_rk4(
    mut rhs: impl FnMut(&[f64], &mut [f64]),
    u0: &[f64],
    times: &[f64],
    substeps: usize,
) -> Result<Trajectory, DataError> {
    if times.is_empty() || substeps == 0 {
        return Err(DataError::Invalid("need at least one time and one substep".into()));
    }
    if times.len() > 1 {
        let h = times[1] - times[0];
        let uniform = times.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1e-300));
        if !(h > 0.0) || !uniform {
            return Err(DataError::Invalid("output times must be uniformly spaced and increasing".into()));
        }
    }
    let n = u0.len();
    let mut states = Vec::with_capacity(n * times.len());
    states.extend_from_slice(u0);
    let mut u = u0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut step = 0usize;
    for w in times.windows(2) {
        let dt = (w[1] - w[0]) / substeps as f64;
        for _ in 0..substeps {
            step += 1;
            rhs(&u, &mut k1);
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * dt * k1[i];
            }
            rhs(&tmp, &mut k2);
            for i in 0..n {
                tmp[i] = u[i] + 0.5 * dt * k2[i];
            }
            rhs(&tmp, &mut k3);
            for i in 0..n {
                tmp[i] = u[i] + dt * k3[i];
            }
            rhs(&tmp, &mut k4);
            for i in 0..n {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { step });
            }
        }
        states.extend_from_slice(&u);
    }
    let states = Tensor::new(&[times.len(), n], states).map_err(|e| DataError::Invalid(e.to_string()))?;
    Trajectory::new(times.to_vec(), states)
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every entry.
pub fn corrupt(traj: &Trajectory, sigma: f64, rng: &mut Rng) -> Result<Trajectory, DataError> {
    if !(sigma >= 0.0) {
        return Err(DataError::Invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = traj.clone();
    if sigma > 0.0 {
        for v in out.states.data_mut() {
            *v += sigma * rng.normal();
        }
    }
    Ok(out)
}
