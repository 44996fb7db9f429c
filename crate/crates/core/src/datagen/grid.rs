use serde::{Deserialize, Serialize};

use super::DataError;
use crate::compute::Tensor;

/// Uniform Cartesian grid in one or two dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Periodic axes exclude the right endpoint; otherwise both endpoints are grid points.
    pub periodic: bool,
    pub fields: usize,
}

impl GridSpec {
    pub fn new(points: &[usize], lo: &[f64], hi: &[f64], periodic: bool, fields: usize) -> Result<Self, DataError> {
        let g = Self { points: points.to_vec(), lo: lo.to_vec(), hi: hi.to_vec(), periodic, fields };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let d = self.points.len();
        if !(1..=2).contains(&d) || self.lo.len() != d || self.hi.len() != d {
            return Err(DataError::Invalid(format!("grid needs 1 or 2 axes with bounds, got {self:?}")));
        }
        if self.fields == 0 || self.points.iter().any(|&p| p < 2) {
            return Err(DataError::Invalid("grid needs >= 2 points per axis and >= 1 field".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(h > l)) {
            return Err(DataError::Invalid("domain bounds must satisfy lo < hi".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.points.len()
    }

    pub fn points_total(&self) -> usize {
        self.points.iter().product()
    }

    /// State dimension `n_y = d_u * prod(points)`.
    pub fn n_y(&self) -> usize {
        self.fields * self.points_total()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let extent = self.hi[axis] - self.lo[axis];
        if self.periodic {
            extent / self.points[axis] as f64
        } else {
            extent / (self.points[axis] - 1) as f64
        }
    }

    pub fn coords(&self, axis: usize) -> Vec<f64> {
        let dx = self.spacing(axis);
        (0..self.points[axis]).map(|i| self.lo[axis] + i as f64 * dx).collect()
    }

    /// Same domain with `points` per axis.
    pub fn with_points(&self, points: &[usize]) -> Result<Self, DataError> {
        Self::new(points, &self.lo, &self.hi, self.periodic, self.fields)
    }

    /// Integer downsampling factor to a coarse grid with `coarse` points per axis.
    pub fn factor_to(&self, coarse: &[usize]) -> Result<usize, DataError> {
        if coarse.len() != self.dim() {
            return Err(DataError::Invalid(format!("coarse grid {coarse:?} has wrong dimension")));
        }
        let mut factor = None;
        for (&f, &c) in self.points.iter().zip(coarse) {
            if c == 0 || f % c != 0 {
                return Err(DataError::Invalid(format!("fine grid {:?} not divisible by {coarse:?}", self.points)));
            }
            match factor {
                None => factor = Some(f / c),
                Some(s) if s != f / c => {
                    return Err(DataError::Invalid("downsampling factor differs between axes".into()))
                }
                _ => {}
            }
        }
        Ok(factor.unwrap_or(1))
    }
}

/// Which subset a trajectory belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Time-stamped fully-resolved states, `states: [n_t, n_y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Tensor,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, states: Tensor) -> Result<Self, DataError> {
        if states.shape().len() != 2 || states.shape()[0] != times.len() {
            return Err(DataError::Invalid(format!(
                "{} times vs states {:?}",
                times.len(),
                states.shape()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DataError::Invalid("times must be strictly increasing".into()));
        }
        Ok(Self { times, states })
    }

    pub fn n_t(&self) -> usize {
        self.times.len()
    }

    pub fn n_y(&self) -> usize {
        self.states.shape()[1]
    }

    pub fn state(&self, i: usize) -> &[f64] {
        self.states.row(i)
    }

    /// Leading observations with `t <= t0 + horizon` (inclusive with a small tolerance).
    pub fn truncated(&self, horizon: f64) -> Trajectory {
        let t0 = self.times[0];
        let keep = self.times.iter().take_while(|&&t| t - t0 <= horizon * (1.0 + 1e-9) + 1e-12).count().max(1);
        let n_y = self.n_y();
        let states = Tensor::new(&[keep, n_y], self.states.data()[..keep * n_y].to_vec()).unwrap();
        Trajectory { times: self.times[..keep].to_vec(), states }
    }
}

/// Trajectories sharing one grid, with split labels and noise metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
    pub noise_sigma: f64,
    /// Free-form generator settings carried in the metadata sidecar.
    pub generator: serde_json::Value,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), DataError> {
        self.grid.validate()?;
        if self.splits.len() != self.trajectories.len() {
            return Err(DataError::Invalid("one split label per trajectory required".into()));
        }
        let n_y = self.grid.n_y();
        let n_t = self.trajectories.first().map(Trajectory::n_t);
        for tr in &self.trajectories {
            if tr.n_y() != n_y {
                return Err(DataError::Invalid(format!("trajectory has n_y={} but grid needs {n_y}", tr.n_y())));
            }
            if Some(tr.n_t()) != n_t || tr.times != self.trajectories[0].times {
                return Err(DataError::Invalid("trajectories must share time stamps".into()));
            }
        }
        Ok(())
    }

    pub fn split(&self, which: Split) -> Vec<&Trajectory> {
        self.trajectories.iter().zip(&self.splits).filter(|(_, s)| **s == which).map(|(t, _)| t).collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.splits.iter().filter(|s| **s == which).count()
    }
}
