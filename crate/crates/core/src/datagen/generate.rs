use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{corrupt, integrate_rk4, DataError, Dataset, GridSpec, Problem, Split};
use crate::compute::Rng;

/// Random initial-condition families. Normal parameters are given as (mean, variance).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `exp(-(x/w)^2)` with `x` the periodic distance to the left end, `w ~ U[w_lo, w_hi]`.
    GaussianPulse { w_lo: f64, w_hi: f64 },
    /// `a cos(pi x) exp(-(x - center)^2 / s^2)`.
    ModulatedCosine { a: (f64, f64), s: (f64, f64), center: f64 },
    /// `a exp(-|x - center|^2 / s^2)` in 2D, zeroed on the boundary ring.
    GaussianBump { a: (f64, f64), s: (f64, f64), center: (f64, f64) },
}

fn normal(rng: &mut Rng, (mean, var): (f64, f64)) -> f64 {
    mean + var.sqrt() * rng.normal()
}

/// Samples one initial state on `grid`.
pub fn initial_condition(ic: &InitialCondition, grid: &GridSpec, rng: &mut Rng) -> Result<Vec<f64>, DataError> {
    match *ic {
        InitialCondition::GaussianPulse { w_lo, w_hi } => {
            if grid.dim() != 1 || !(w_hi >= w_lo && w_lo > 0.0) {
                return Err(DataError::Invalid("gaussian pulse needs a 1D grid and 0 < w_lo <= w_hi".into()));
            }
            let w = w_lo + (w_hi - w_lo) * rng.uniform();
            let extent = grid.hi[0] - grid.lo[0];
            Ok(grid
                .coords(0)
                .iter()
                .map(|&x| {
                    let r = x - grid.lo[0];
                    let d = if grid.periodic { r.min(extent - r) } else { r };
                    (-(d / w).powi(2)).exp()
                })
                .collect())
        }
        InitialCondition::ModulatedCosine { a, s, center } => {
            if grid.dim() != 1 {
                return Err(DataError::Invalid("modulated cosine needs a 1D grid".into()));
            }
            let a = normal(rng, a);
            let s = normal(rng, s);
            Ok(grid
                .coords(0)
                .iter()
                .map(|&x| a * (std::f64::consts::PI * x).cos() * (-((x - center) / s).powi(2)).exp())
                .collect())
        }
        InitialCondition::GaussianBump { a, s, center } => {
            if grid.dim() != 2 {
                return Err(DataError::Invalid("gaussian bump needs a 2D grid".into()));
            }
            let a = normal(rng, a);
            let s = normal(rng, s);
            let (x1, x2) = (grid.coords(0), grid.coords(1));
            let (n1, n2) = (x1.len(), x2.len());
            let mut u = vec![0.0; n1 * n2];
            for i in 1..n1 - 1 {
                for j in 1..n2 - 1 {
                    let r2 = (x1[i] - center.0).powi(2) + (x2[j] - center.1).powi(2);
                    u[i * n2 + j] = a * (-r2 / (s * s)).exp();
                }
            }
            Ok(u)
        }
    }
}

/// Everything needed to reproduce a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub problem: Problem,
    pub grid: GridSpec,
    pub initial: InitialCondition,
    pub t_end: f64,
    /// Integrator step.
    pub dt: f64,
    /// Integrator steps between stored observations.
    pub save_every: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Validation and test errors are scored up to this time only.
    #[serde(default)]
    pub eval_horizon: Option<f64>,
}

impl GeneratorConfig {
    /// Named configurations. The `-desk` variants shrink grids and trajectory counts.
    pub fn preset(name: &str) -> Option<GeneratorConfig> {
        let pulse = InitialCondition::GaussianPulse { w_lo: 0.01, w_hi: 0.02 };
        let cosine = InitialCondition::ModulatedCosine { a: (2.0, 0.01), s: (1.0, 0.01), center: 7.5 };
        let bump = InitialCondition::GaussianBump { a: (1.0, 0.01), s: (0.2, 0.0001), center: (0.3, 0.3) };
        let line = |n: usize, hi: f64| GridSpec::new(&[n], &[0.0], &[hi], true, 1).unwrap();
        let square = |n: usize| GridSpec::new(&[n, n], &[0.0, 0.0], &[1.0, 1.0], false, 1).unwrap();
        let cfg = |problem, grid, initial, dt, save_every, counts: (usize, usize, usize), noise_sigma| GeneratorConfig {
            problem,
            grid,
            initial,
            t_end: 1.0,
            dt,
            save_every,
            n_train: counts.0,
            n_val: counts.1,
            n_test: counts.2,
            noise_sigma,
            seed: 0,
            eval_horizon: None,
        };
        let adv = Problem::Advection { velocity: 1.0 };
        let kdv = Problem::Kdv { nu: 0.02 };
        let burgers = Problem::Burgers2d { nu: 0.005 };
        Some(match name {
            "advection" => GeneratorConfig { eval_horizon: Some(0.2), ..cfg(adv, line(1000, 1.0), pulse, 1e-3, 1, (20, 5, 5), 1e-3) },
            "advection-desk" => GeneratorConfig { eval_horizon: Some(0.2), ..cfg(adv, line(200, 1.0), pulse, 1e-3, 5, (10, 5, 5), 1e-3) },
            // The third-difference term limits explicit steps to about 0.35 dx^3 / nu.
            "kdv" => cfg(kdv, line(1000, 10.0), cosine, 1e-5, 100, (10, 5, 5), 1e-2),
            "kdv-desk" => cfg(kdv, line(250, 10.0), cosine, 2.5e-4, 20, (10, 5, 5), 1e-2),
            "burgers2d" => cfg(burgers, square(128), bump, 1e-3, 1, (20, 5, 5), 1e-3),
            "burgers2d-desk" => cfg(burgers, square(64), bump, 1e-3, 20, (10, 5, 5), 1e-3),
            _ => return None,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["advection", "advection-desk", "kdv", "kdv-desk", "burgers2d", "burgers2d-desk"]
    }

    /// Observation times `0, save_every*dt, ...` up to `t_end`.
    pub fn times(&self) -> Result<Vec<f64>, DataError> {
        if !(self.dt > 0.0) || self.save_every == 0 || !(self.t_end > 0.0) {
            return Err(DataError::Invalid("dt, save_every and t_end must be positive".into()));
        }
        let h = self.dt * self.save_every as f64;
        let n = (self.t_end / h + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| i as f64 * h).collect())
    }
}

/// Integrates and corrupts every trajectory; splits are assigned train, then val, then test.
///
/// Trajectory `k` draws its initial condition from substream `2k` and its noise from
/// substream `2k + 1` of the configured seed, so the result does not depend on thread count.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset, DataError> {
    cfg.problem.check_grid(&cfg.grid)?;
    let times = cfg.times()?;
    let root = Rng::new(cfg.seed);
    let n = cfg.n_train + cfg.n_val + cfg.n_test;
    if n == 0 {
        return Err(DataError::Invalid("no trajectories requested".into()));
    }
    let trajectories = (0..n)
        .into_par_iter()
        .map(|k| {
            let u0 = initial_condition(&cfg.initial, &cfg.grid, &mut root.substream(2 * k as u64))?;
            let clean = integrate_rk4(|u, out| cfg.problem.eval(&cfg.grid, u, out), &u0, &times, cfg.save_every)?;
            corrupt(&clean, cfg.noise_sigma, &mut root.substream(2 * k as u64 + 1))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let splits = [(Split::Train, cfg.n_train), (Split::Val, cfg.n_val), (Split::Test, cfg.n_test)]
        .iter()
        .flat_map(|&(s, c)| std::iter::repeat_n(s, c))
        .collect();
    let generator = serde_json::to_value(cfg).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(Dataset { grid: cfg.grid.clone(), trajectories, splits, noise_sigma: cfg.noise_sigma, generator })
}
