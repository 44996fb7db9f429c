use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, GridSpec, Split, Trajectory};
use crate::compute::Tensor;

pub const MST1_MAGIC: [u8; 4] = *b"MST1";
pub const MST1_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    noise_sigma: f64,
    periodic: bool,
    splits: Vec<Split>,
    #[serde(default)]
    generator: serde_json::Value,
}

/// Metadata lives next to the binary at `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the binary payload and its JSON sidecar.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<(), DataError> {
    ds.validate()?;
    let g = &ds.grid;
    let n_t = ds.trajectories.first().map_or(0, Trajectory::n_t);
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&MST1_MAGIC)?;
    let mut header = vec![MST1_VERSION, g.dim() as u32, g.fields as u32];
    header.extend(g.points.iter().map(|&p| p as u32));
    header.push(ds.trajectories.len() as u32);
    header.push(n_t as u32);
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    for a in 0..g.dim() {
        w.write_all(&g.lo[a].to_le_bytes())?;
        w.write_all(&g.hi[a].to_le_bytes())?;
    }
    if let Some(first) = ds.trajectories.first() {
        for t in &first.times {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    for tr in &ds.trajectories {
        for v in tr.states.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = Sidecar {
        format: "MST1".into(),
        version: MST1_VERSION,
        noise_sigma: ds.noise_sigma,
        periodic: g.periodic,
        splits: ds.splits.clone(),
        generator: ds.generator.clone(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Sidecar(e.to_string()))?;
    fs::write(sidecar_path(path), text + "\n")?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], DataError> {
        if self.buf.len() - self.pos < n {
            return Err(DataError::Truncated(format!("while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, DataError> {
        let bytes = n.checked_mul(8).ok_or_else(|| DataError::Truncated(format!("{what} too large")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Reads a dataset written by [`write_dataset`]. Fails without returning partial data.
pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let buf = fs::read(path)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if magic != MST1_MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != MST1_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let d = c.u32("dimension")? as usize;
    if !(1..=2).contains(&d) {
        return Err(DataError::Invalid(format!("spatial dimension {d} not supported")));
    }
    let fields = c.u32("field count")? as usize;
    let points = (0..d).map(|_| c.u32("points").map(|p| p as usize)).collect::<Result<Vec<_>, _>>()?;
    let n_traj = c.u32("trajectory count")? as usize;
    let n_t = c.u32("time count")? as usize;
    let bounds = c.f64s(2 * d, "domain bounds")?;
    let times = c.f64s(n_t, "times")?;

    let meta_text = fs::read_to_string(sidecar_path(path))
        .map_err(|e| DataError::Sidecar(format!("{}: {e}", sidecar_path(path).display())))?;
    let meta: Sidecar = serde_json::from_str(&meta_text).map_err(|e| DataError::Sidecar(e.to_string()))?;
    if meta.splits.len() != n_traj {
        return Err(DataError::Sidecar(format!("{} split labels for {n_traj} trajectories", meta.splits.len())));
    }
    let lo: Vec<f64> = bounds.iter().step_by(2).copied().collect();
    let hi: Vec<f64> = bounds.iter().skip(1).step_by(2).copied().collect();
    let grid = GridSpec::new(&points, &lo, &hi, meta.periodic, fields)?;
    let n_y = grid.n_y();

    let mut trajectories = Vec::with_capacity(n_traj);
    for k in 0..n_traj {
        let data = c.f64s(n_t * n_y, &format!("trajectory {k}"))?;
        let states = Tensor::new(&[n_t, n_y], data).map_err(|e| DataError::Invalid(e.to_string()))?;
        trajectories.push(Trajectory::new(times.clone(), states)?);
    }
    if c.pos != buf.len() {
        return Err(DataError::Invalid(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let ds = Dataset { grid, trajectories, splits: meta.splits, noise_sigma: meta.noise_sigma, generator: meta.generator };
    ds.validate()?;
    Ok(ds)
}
