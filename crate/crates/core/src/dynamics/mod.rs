//! Coupled latent SDE: stencil macroscale drift, dense microscale drift,
//! constant diagonal dispersion, and an Euler-Maruyama integrator.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{linear, mlp, mlp_specs, param, Block, Bound, Graph, Init, ParamSpec, ParamStore, Rng, Tensor, Var};
use crate::scales::{softplus_inv, ScaleOps};
use crate::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Stencil half-width of the macroscale drift.
    pub stencil_q: usize,
    pub macro_hidden: Vec<usize>,
    pub micro_hidden: Vec<usize>,
    /// Append sin/cos of the normalised coarse-point coordinates to each stencil.
    pub positional: bool,
    pub init_dispersion: f64,
    /// The microscale drift sees `t / time_scale`.
    pub time_scale: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            stencil_q: 2,
            macro_hidden: vec![64, 64],
            micro_hidden: vec![64, 64],
            positional: false,
            init_dispersion: 1e-2,
            time_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdeModel {
    pub scales: ScaleOps,
    pub config: DynamicsConfig,
    /// Per coarse point, per field, per stencil offset: flat index into `zeta`.
    stencil: Arc<Vec<usize>>,
    positional: Option<Tensor>,
}

impl SdeModel {
    pub fn new(scales: ScaleOps, config: DynamicsConfig) -> Result<Self> {
        if !(config.init_dispersion > 0.0) || !(config.time_scale > 0.0) {
            return invalid("dispersion init and time scale must be positive");
        }
        let coarse = scales.config.coarse.clone();
        let periodic = scales.config.grid.periodic;
        let q = config.stencil_q as i64;
        let points: usize = coarse.iter().product();
        let fields = scales.fields();
        let wrap = |i: i64, n: usize| -> usize {
            if periodic {
                i.rem_euclid(n as i64) as usize
            } else {
                i.clamp(0, n as i64 - 1) as usize
            }
        };
        let mut stencil = Vec::new();
        let mut pos = Vec::new();
        for p in 0..points {
            let (i0, i1) = if coarse.len() == 1 { (p, 0) } else { (p / coarse[1], p % coarse[1]) };
            for f in 0..fields {
                if coarse.len() == 1 {
                    for o in -q..=q {
                        stencil.push(f * points + wrap(i0 as i64 + o, coarse[0]));
                    }
                } else {
                    for o0 in -q..=q {
                        for o1 in -q..=q {
                            let a = wrap(i0 as i64 + o0, coarse[0]);
                            let b = wrap(i1 as i64 + o1, coarse[1]);
                            stencil.push(f * points + a * coarse[1] + b);
                        }
                    }
                }
            }
            let tau = std::f64::consts::TAU;
            let x0 = i0 as f64 / coarse[0] as f64;
            let x1 = if coarse.len() == 2 { i1 as f64 / coarse[1] as f64 } else { 0.0 };
            pos.extend([(tau * x0).sin(), (tau * x0).cos(), (tau * x1).sin(), (tau * x1).cos()]);
        }
        let positional = config.positional.then(|| Tensor::new(&[points, 4], pos).expect("positional table"));
        Ok(Self { scales, config, stencil: Arc::new(stencil), positional })
    }

    pub fn n_eta(&self) -> usize {
        self.scales.n_eta
    }

    pub fn n_zeta(&self) -> usize {
        self.scales.n_zeta()
    }

    pub fn n_z(&self) -> usize {
        self.scales.n_z()
    }

    fn points(&self) -> usize {
        self.n_zeta() / self.scales.fields()
    }

    fn stencil_width(&self) -> usize {
        self.stencil.len() / self.n_zeta()
    }

    fn is_2d(&self) -> bool {
        self.scales.config.grid.dim() == 2
    }

    /// Parameters of the drift and dispersion (the scale operators keep their own).
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let fields = self.scales.fields();
        let mut widths = vec![vec![Block::Fixed(fields * self.stencil_width() + 4 * self.config.positional as usize), Block::Eta]];
        widths.extend(self.config.macro_hidden.iter().map(|&h| vec![Block::Fixed(h)]));
        widths.push(vec![Block::Fixed(fields)]);
        let mut specs = mlp_specs("macro_drift", &widths);
        specs.push(ParamSpec::new(
            "sde.dispersion",
            vec![vec![Block::Fixed(self.n_zeta()), Block::Eta]],
            Init::Const(softplus_inv(self.config.init_dispersion)),
        ));
        if self.n_eta() == 0 {
            return specs;
        }
        let coupling = if self.is_2d() {
            specs.push(ParamSpec::new("micro_drift.psi", vec![vec![Block::Fixed(self.n_zeta())], vec![Block::Eta]], Init::Xavier));
            Block::Eta
        } else {
            Block::Fixed(self.n_zeta())
        };
        let mut widths = vec![vec![Block::Eta, coupling, Block::Fixed(1)]];
        widths.extend(self.config.micro_hidden.iter().map(|&h| vec![Block::Fixed(h)]));
        widths.push(vec![Block::Eta]);
        specs.extend(mlp_specs("micro_drift", &widths));
        specs
    }

    /// Scale operators, drift, dispersion, in one list.
    pub fn all_param_specs(&self) -> Vec<ParamSpec> {
        let mut s = self.scales.param_specs();
        s.extend(self.param_specs());
        s
    }

    fn check_z(&self, g: &Graph, z: Var) -> Result<usize> {
        match g.shape(z) {
            [r, w] if *w == self.n_z() => Ok(*r),
            s => invalid(format!("latent state must be [rows, {}], got {s:?}", self.n_z())),
        }
    }

    /// Macroscale drift `[rows, n_zeta]` from `z: [rows, n_z]`.
    pub fn macro_drift_g(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let rows = self.check_z(g, z)?;
        let (n_z, n_zeta, n_eta) = (self.n_z(), self.n_zeta(), self.n_eta());
        let points = self.points();
        let fields = self.scales.fields();
        let per_point = fields * self.stencil_width();
        let width = per_point + n_eta;
        let mut idx = Vec::with_capacity(rows * points * width);
        for r in 0..rows {
            let base = (r * n_z) as i64;
            for pt in 0..points {
                idx.extend(self.stencil[pt * per_point..(pt + 1) * per_point].iter().map(|&i| base + i as i64));
                idx.extend((0..n_eta).map(|k| base + (n_zeta + k) as i64));
            }
        }
        let mut x = g.gather(z, Arc::new(idx), &[rows * points, width])?;
        if let Some(pos) = &self.positional {
            let tiled: Vec<f64> = (0..rows).flat_map(|_| pos.data().iter().copied()).collect();
            let c = g.constant(Tensor::new(&[rows * points, 4], tiled)?);
            let (a, b) = (g.slice(x, 1, 0, per_point)?, g.slice(x, 1, per_point, width)?);
            x = g.concat(&[a, c, b], 1)?;
        }
        let layers = self.config.macro_hidden.len() + 1;
        let out = mlp(g, p, "macro_drift", layers, x)?;
        if fields == 1 {
            return Ok(g.reshape(out, &[rows, n_zeta])?);
        }
        // [rows * points, fields] -> field-major [rows, fields * points]
        let perm: Vec<i64> = (0..rows)
            .flat_map(|r| (0..fields).flat_map(move |f| (0..points).map(move |pt| ((r * points + pt) * fields + f) as i64)))
            .collect();
        Ok(g.gather(out, Arc::new(perm), &[rows, n_zeta])?)
    }

    /// Microscale drift `[rows, n_eta]`; `t: [rows, 1]` holds raw times.
    pub fn micro_drift_g(&self, g: &mut Graph, p: &Bound, z: Var, t: Var) -> Result<Var> {
        let rows = self.check_z(g, z)?;
        if self.n_eta() == 0 {
            return Ok(g.constant(Tensor::zeros(&[rows, 0])));
        }
        let zeta = g.slice(z, 1, 0, self.n_zeta())?;
        let eta = g.slice(z, 1, self.n_zeta(), self.n_z())?;
        let coupled = if self.is_2d() {
            let psi = param(p, "micro_drift.psi")?;
            linear(g, zeta, psi, None)?
        } else {
            zeta
        };
        let ts = g.scale(t, 1.0 / self.config.time_scale)?;
        let x = g.concat(&[eta, coupled, ts], 1)?;
        let layers = self.config.micro_hidden.len() + 1;
        Ok(mlp(g, p, "micro_drift", layers, x)?)
    }

    /// Full drift `[rows, n_z]`.
    pub fn drift_g(&self, g: &mut Graph, p: &Bound, z: Var, t: Var) -> Result<Var> {
        let f = self.macro_drift_g(g, p, z)?;
        if self.n_eta() == 0 {
            return Ok(f);
        }
        let h = self.micro_drift_g(g, p, z, t)?;
        Ok(g.concat(&[f, h], 1)?)
    }

    /// Positive dispersion diagonal `[n_z]`.
    pub fn dispersion_g(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let raw = param(p, "sde.dispersion")?;
        Ok(g.softplus(raw)?)
    }

    fn eval(
        &self,
        params: &ParamStore,
        z: &Tensor,
        t: f64,
        f: impl FnOnce(&Self, &mut Graph, &Bound, Var, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let single = z.shape().len() == 1;
        let z2 = if single { z.clone().reshape(&[1, z.len()])? } else { z.clone() };
        let rows = z2.shape()[0];
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let zv = g.constant(z2);
        let tv = g.constant(Tensor::full(&[rows, 1], t));
        let out = f(self, &mut g, &p, zv, tv)?;
        let v = g.value(out).clone();
        Ok(if single { v.reshape(&[g.shape(out)[1]])? } else { v })
    }

    /// `z` is `[n_z]` or `[rows, n_z]`; all rows share time `t`.
    pub fn drift(&self, params: &ParamStore, z: &Tensor, t: f64) -> Result<Tensor> {
        self.eval(params, z, t, Self::drift_g)
    }

    pub fn macro_drift(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        self.eval(params, z, 0.0, |m, g, p, z, _| m.macro_drift_g(g, p, z))
    }

    pub fn micro_drift(&self, params: &ParamStore, z: &Tensor, t: f64) -> Result<Tensor> {
        self.eval(params, z, t, Self::micro_drift_g)
    }

    pub fn dispersion(&self, params: &ParamStore) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let l = self.dispersion_g(&mut g, &p)?;
        Ok(g.value(l).data().to_vec())
    }
}

/// Paths advanced together; fixed so results do not depend on the thread count.
const PATH_CHUNK: usize = 64;

/// Euler-Maruyama for `dz = drift(z, t) dt + diag(ell) dW` on `n_paths` paths.
///
/// `z0` is shared (`[n_z]`) or per path (`[n_paths, n_z]`). Path `i` draws its
/// noise from `rng.substream(i)`. Returns states at the step indices in
/// `record` (each in `0..=n_steps`, step 0 being `t0`) as `[n_paths, record.len(), n_z]`.
#[allow(clippy::too_many_arguments)]
pub fn simulate<F>(
    drift: F,
    ell: &[f64],
    z0: &Tensor,
    t0: f64,
    dt: f64,
    n_steps: usize,
    n_paths: usize,
    record: &[usize],
    rng: &Rng,
) -> Result<Tensor>
where
    F: Fn(&Tensor, f64) -> Result<Tensor> + Sync,
{
    let n_z = ell.len();
    if n_steps == 0 || n_paths == 0 {
        return invalid("need at least one step and one path");
    }
    if !(dt > 0.0) {
        return invalid("time step must be positive");
    }
    if record.iter().any(|&k| k > n_steps) {
        return invalid("recorded step beyond the final step");
    }
    let shared = match z0.shape() {
        [n] if *n == n_z => true,
        [p, n] if *p == n_paths && *n == n_z => false,
        s => return invalid(format!("initial state {s:?} does not fit {n_paths} paths of dimension {n_z}")),
    };
    let sq = dt.sqrt();
    let n_rec = record.len();
    let chunks: Vec<usize> = (0..n_paths).step_by(PATH_CHUNK).collect();
    let results: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|&start| {
            let rows = PATH_CHUNK.min(n_paths - start);
            let mut rngs: Vec<Rng> = (start..start + rows).map(|i| rng.substream(i as u64)).collect();
            let mut z = if shared {
                z0.data().repeat(rows)
            } else {
                z0.data()[start * n_z..(start + rows) * n_z].to_vec()
            };
            let mut out = vec![0.0; rows * n_rec * n_z];
            let store = |out: &mut [f64], z: &[f64], step: usize| {
                for (j, _) in record.iter().enumerate().filter(|(_, &k)| k == step) {
                    for r in 0..rows {
                        out[(r * n_rec + j) * n_z..(r * n_rec + j + 1) * n_z].copy_from_slice(&z[r * n_z..(r + 1) * n_z]);
                    }
                }
            };
            store(&mut out, &z, 0);
            let mut noise = vec![0.0; n_z];
            for k in 0..n_steps {
                let t = t0 + k as f64 * dt;
                let zt = Tensor::new(&[rows, n_z], z)?;
                let f = drift(&zt, t)?;
                if f.shape() != [rows, n_z] {
                    return invalid(format!("drift returned {:?}, expected [{rows}, {n_z}]", f.shape()));
                }
                z = zt.into_data();
                for r in 0..rows {
                    rngs[r].fill_normal(&mut noise);
                    let zr = &mut z[r * n_z..(r + 1) * n_z];
                    let fr = &f.data()[r * n_z..(r + 1) * n_z];
                    for i in 0..n_z {
                        zr[i] += fr[i] * dt + ell[i] * sq * noise[i];
                    }
                    if zr.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("path {} at step {}", start + r, k + 1)));
                    }
                }
                store(&mut out, &z, k + 1);
            }
            Ok(out)
        })
        .collect();
    let mut data = Vec::with_capacity(n_paths * n_rec * n_z);
    for r in results {
        data.extend(r?);
    }
    Ok(Tensor::new(&[n_paths, n_rec, n_z], data)?)
}

/// Full trajectories `[n_paths, n_steps + 1, n_z]` of the learned SDE on `[t0, t1]`.
#[allow(clippy::too_many_arguments)]
pub fn euler_maruyama(
    model: &SdeModel,
    params: &ParamStore,
    z0: &Tensor,
    t0: f64,
    t1: f64,
    n_steps: usize,
    rng: &Rng,
    n_paths: usize,
) -> Result<Tensor> {
    if n_steps == 0 || !(t1 > t0) {
        return invalid("need n_steps >= 1 and t1 > t0");
    }
    let ell = model.dispersion(params)?;
    let record: Vec<usize> = (0..=n_steps).collect();
    let dt = (t1 - t0) / n_steps as f64;
    simulate(|z, t| model.drift(params, z, t), &ell, z0, t0, dt, n_steps, n_paths, &record, rng)
}
