use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

/// Consecutive observations sharing one variational path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    /// Observation indices (0-based) covered by the segment.
    pub obs: Vec<usize>,
    pub times: Vec<f64>,
    /// Whether each covered observation is counted in this segment's likelihood.
    pub owned: Vec<bool>,
}

impl Segment {
    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn owned_obs(&self) -> impl Iterator<Item = usize> + '_ {
        self.obs.iter().zip(&self.owned).filter(|(_, &o)| o).map(|(&i, _)| i)
    }
}

/// Splits `times` into `ceil(n_t / m)` blocks of `m` observations. Every block
/// after the first is extended back to the previous block's last observation,
/// so neighbours share that timestamp; it stays owned by the earlier segment.
pub fn segment(times: &[f64], m: usize) -> Result<Vec<Segment>> {
    if m < 2 {
        return invalid(format!("segment length must be at least 2, got {m}"));
    }
    let n_t = times.len();
    if n_t < 2 {
        return invalid("need at least two observations to segment");
    }
    let count = n_t.div_ceil(m);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (lo, hi) = (k * m, ((k + 1) * m).min(n_t));
        let first = if k == 0 { lo } else { lo - 1 };
        let obs: Vec<usize> = (first..hi).collect();
        let owned = obs.iter().map(|&i| i >= lo).collect();
        out.push(Segment { index: k, times: obs.iter().map(|&i| times[i]).collect(), obs, owned });
    }
    Ok(out)
}
