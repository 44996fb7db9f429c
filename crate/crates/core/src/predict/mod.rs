//! Monte Carlo posterior predictive, its moments, the relative error metric,
//! and Fourier amplitude spectra.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::compute::{ParamStore, Rng, Tensor};
use crate::dynamics::{simulate, SdeModel};
use crate::likelihood::{reconstruct, PoeParams};
use crate::{invalid, Result};

/// Equally weighted Gaussian mixture with a shared diagonal covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMixture {
    pub t: f64,
    /// Component means `[N, n_y]`.
    pub means: Tensor,
    pub cov: Vec<f64>,
}

impl PredictiveMixture {
    pub fn components(&self) -> usize {
        self.means.shape()[0]
    }
}

/// Predictive distributions at `times` (the first entry is the time of `y0`).
///
/// Samples `N` initial latents from the encoder, integrates each with
/// Euler-Maruyama at step `dt`, and decodes every sample.
#[allow(clippy::too_many_arguments)]
pub fn posterior_predict(
    model: &SdeModel,
    params: &ParamStore,
    y0: &Tensor,
    times: &[f64],
    n_paths: usize,
    dt: f64,
    rng: &Rng,
) -> Result<Vec<PredictiveMixture>> {
    if n_paths == 0 {
        return invalid("need at least one sample path");
    }
    if times.is_empty() || !(dt > 0.0) {
        return invalid("need prediction times and a positive step");
    }
    let t0 = times[0];
    let mut record = Vec::with_capacity(times.len());
    for &t in times {
        let k = ((t - t0) / dt).round();
        if k < 0.0 || ((t - t0) - k * dt).abs() > 1e-6 * dt.max((t - t0).abs()) {
            return invalid(format!("time {t} is not on the step grid {t0} + k*{dt}"));
        }
        record.push(k as usize);
    }
    let poe = PoeParams::from_store(params)?;
    let enc = model.scales.encode(params, y0)?;
    let n_z = model.n_z();
    let mut init_rng = rng.substream(0);
    let mut z0 = Tensor::zeros(&[n_paths, n_z]);
    for row in z0.data_mut().chunks_mut(n_z) {
        for (i, v) in row.iter_mut().enumerate() {
            *v = enc.mean.data()[i] + enc.cov.data()[i].sqrt() * init_rng.normal();
        }
    }
    let n_steps = *record.iter().max().unwrap();
    let states = if n_steps == 0 {
        let data: Vec<f64> = z0.data().chunks(n_z).flat_map(|r| record.iter().flat_map(move |_| r.iter().copied())).collect();
        Tensor::new(&[n_paths, record.len(), n_z], data)?
    } else {
        let ell = model.dispersion(params)?;
        simulate(|z, t| model.drift(params, z, t), &ell, &z0, t0, dt, n_steps, n_paths, &record, &rng.substream(1))?
    };
    let flat = states.reshape(&[n_paths * record.len(), n_z])?;
    let rec = reconstruct(&model.scales, params, &poe, &flat)?;
    let n_y = model.scales.n_y();
    let n_t = times.len();
    Ok((0..n_t)
        .map(|j| {
            let mut means = Vec::with_capacity(n_paths * n_y);
            for i in 0..n_paths {
                means.extend_from_slice(rec.mean.row(i * n_t + j));
            }
            PredictiveMixture { t: times[j], means: Tensor::new(&[n_paths, n_y], means).unwrap(), cov: rec.cov.clone() }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// False when a single component leaves the sample-covariance term undefined.
    pub includes_spread: bool,
}

/// Mixture mean and diagonal covariance `Sigma_y + sample variance of the means`
/// (divisor `N - 1`).
pub fn predictive_moments(mix: &PredictiveMixture) -> Moments {
    let (n, n_y) = (mix.components(), mix.cov.len());
    let mut mean = vec![0.0; n_y];
    for r in mix.means.data().chunks(n_y) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = mix.cov.clone();
    if n >= 2 {
        let mut ss = vec![0.0; n_y];
        for r in mix.means.data().chunks(n_y) {
            for i in 0..n_y {
                ss[i] += (r[i] - mean[i]).powi(2);
            }
        }
        for i in 0..n_y {
            var[i] += ss[i] / (n - 1) as f64;
        }
    }
    Moments { mean, var, includes_spread: n >= 2 }
}

/// `||y - y_hat|| / ||y||`.
pub fn relative_error(y_true: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y_true.len() != y_hat.len() {
        return invalid("prediction and observation differ in length");
    }
    let norm = y_true.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return invalid("relative error undefined for a zero observation");
    }
    let diff = y_true.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

/// Relative error of the predictive mean.
pub fn error_metric(y_true: &[f64], mix: &PredictiveMixture) -> Result<f64> {
    relative_error(y_true, &predictive_moments(mix).mean)
}

/// Per-trajectory, per-time errors with the summary over trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub trajectory_ids: Vec<usize>,
    pub times: Vec<f64>,
    /// `eps[k][i]`: trajectory `k` at `times[i]`. A row may stop early when its
    /// rollout was truncated; its mean then covers the times it reached.
    pub eps: Vec<Vec<f64>>,
    pub trajectory_means: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (divisor `n - 1`) of the per-trajectory means; 0 for one trajectory.
    pub std: f64,
}

impl ErrorReport {
    pub fn new(trajectory_ids: Vec<usize>, times: Vec<f64>, eps: Vec<Vec<f64>>) -> Result<Self> {
        if eps.len() != trajectory_ids.len() || eps.is_empty() || eps.iter().any(|r| r.len() > times.len() || r.is_empty()) {
            return invalid("error table does not match trajectories and times");
        }
        let trajectory_means: Vec<f64> = eps.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        let n = trajectory_means.len() as f64;
        let mean = trajectory_means.iter().sum::<f64>() / n;
        let std = if trajectory_means.len() < 2 {
            0.0
        } else {
            (trajectory_means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { trajectory_ids, times, eps, trajectory_means, mean, std })
    }

    /// Rows `trajectory_id,t,epsilon` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory_id,t,epsilon\n");
        for (id, row) in self.trajectory_ids.iter().zip(&self.eps) {
            for (t, e) in self.times.iter().zip(row) {
                s.push_str(&format!("{id},{t},{e}\n"));
            }
        }
        s
    }
}

/// Amplitudes `|u_hat_k|` of the unnormalised DFT, with signed wavenumbers
/// (`k > n/2` reported as `k - n`), in FFT order.
pub fn export_spectrum(field: &[f64]) -> Vec<(i64, f64)> {
    let n = field.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = field.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.iter()
        .enumerate()
        .map(|(k, c)| (if k > n / 2 { k as i64 - n as i64 } else { k as i64 }, c.norm()))
        .collect()
}
