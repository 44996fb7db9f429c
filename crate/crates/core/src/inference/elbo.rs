use std::sync::Arc;

use super::quadrature::{gauss_legendre_on, hermite_weights};
use super::segment::Segment;
use crate::compute::{Bound, Graph, ParamStore, Rng, Tensor, Var};
use crate::datagen::Trajectory;
use crate::dynamics::SdeModel;
use crate::likelihood::poe_loglik_g;
use crate::{invalid, Error, Result};

/// One segment of one trajectory; `trajectory` is only used to label errors.
#[derive(Clone, Copy, Debug)]
pub struct SegmentRef<'a> {
    pub trajectory: usize,
    pub data: &'a Trajectory,
    pub segment: &'a Segment,
}

/// Time geometry and observations of a batch of segments.
///
/// Anchor rows are the stacked observations of every segment. Quadrature rows
/// hold `n_mc` repetitions of `n_quad` nodes per segment, and observation rows
/// `n_mc` repetitions of each segment's owned observations, both segment-major.
#[derive(Clone, Debug)]
pub struct ElboBatch {
    labels: Vec<(usize, usize)>,
    anchors: Tensor,
    /// Anchor row of each observation row.
    obs_rows: Vec<usize>,
    obs_segment: Vec<usize>,
    /// Quadrature and observation row counts per segment.
    per_segment: Vec<(usize, usize)>,
    w: Tensor,
    dw: Tensor,
    quad_t: Tensor,
    quad_w: Tensor,
    quad_segment: Vec<usize>,
    n_mc: usize,
}

impl ElboBatch {
    pub fn new(items: &[SegmentRef], n_quad: usize, n_mc: usize) -> Result<Self> {
        if items.is_empty() || n_quad == 0 || n_mc == 0 {
            return invalid("ELBO batch needs segments, quadrature nodes and samples");
        }
        let n_y = items[0].data.n_y();
        let rows: usize = items.iter().map(|s| s.segment.obs.len()).sum();
        let q_rows = items.len() * n_quad * n_mc;
        let mut anchors = Vec::with_capacity(rows * n_y);
        let (mut obs_rows, mut obs_segment, mut per_segment) = (Vec::new(), Vec::new(), Vec::new());
        let mut w = vec![0.0; q_rows * rows];
        let mut dw = vec![0.0; q_rows * rows];
        let (mut quad_t, mut quad_w, mut quad_segment) = (Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (k, item) in items.iter().enumerate() {
            let seg = item.segment;
            if item.data.n_y() != n_y {
                return invalid("segments in one batch must share n_y");
            }
            if seg.obs.len() < 2 {
                return invalid(format!("segment {} has fewer than two observations", seg.index));
            }
            let m = seg.obs.len();
            for &i in &seg.obs {
                anchors.extend_from_slice(item.data.state(i));
            }
            let owned: Vec<usize> = (0..m).filter(|&j| seg.owned[j]).map(|j| offset + j).collect();
            for _ in 0..n_mc {
                obs_rows.extend(&owned);
                obs_segment.extend(std::iter::repeat_n(k, owned.len()));
            }
            per_segment.push((n_quad * n_mc, owned.len() * n_mc));
            let (nodes, weights) = gauss_legendre_on(n_quad, seg.start(), seg.end());
            let (sw, sdw) = hermite_weights(&seg.times, &nodes);
            for rep in 0..n_mc {
                for q in 0..n_quad {
                    let row = (k * n_mc + rep) * n_quad + q;
                    w[row * rows + offset..row * rows + offset + m].copy_from_slice(&sw[q * m..(q + 1) * m]);
                    dw[row * rows + offset..row * rows + offset + m].copy_from_slice(&sdw[q * m..(q + 1) * m]);
                    quad_t.push(nodes[q]);
                    quad_w.push(weights[q] / n_mc as f64);
                    quad_segment.push(k);
                }
            }
            offset += m;
        }
        Ok(Self {
            labels: items.iter().map(|s| (s.trajectory, s.segment.index)).collect(),
            anchors: Tensor::new(&[rows, n_y], anchors)?,
            obs_rows,
            obs_segment,
            per_segment,
            w: Tensor::new(&[q_rows, rows], w)?,
            dw: Tensor::new(&[q_rows, rows], dw)?,
            quad_t: Tensor::new(&[q_rows, 1], quad_t)?,
            quad_w: Tensor::vector(quad_w),
            quad_segment,
            n_mc,
        })
    }

    pub fn segments(&self) -> usize {
        self.labels.len()
    }
}

/// Graph handles of the ELBO pieces.
#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub total: Var,
    pub loglik: Var,
    pub integral: Var,
    /// Per observation row.
    pub loglik_rows: Var,
    /// Weighted per-node integrand `[n_quad * n_mc * segments]`.
    pub integral_rows: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub loglik: f64,
    pub integral: f64,
    /// `loglik - integral / 2`
    pub total: f64,
}

/// Standard normal draws for quadrature and observation rows. Each segment
/// reads its own substream, so a segment's noise does not depend on its batch position.
fn segment_noise(batch: &ElboBatch, n_z: usize, rng: &mut Rng) -> (Tensor, Tensor) {
    let base = Rng::new(rng.next_u64());
    let (mut quad, mut obs) = (Vec::new(), Vec::new());
    for (&(traj, seg), &(nq, no)) in batch.labels.iter().zip(&batch.per_segment) {
        let mut r = base.substream(((traj as u64) << 32) | seg as u64);
        quad.extend(r.gauss_sample(&[nq * n_z]).into_data());
        obs.extend(r.gauss_sample(&[no * n_z]).into_data());
    }
    let q_rows = quad.len() / n_z.max(1);
    let o_rows = obs.len() / n_z.max(1);
    (Tensor::new(&[q_rows, n_z], quad).unwrap(), Tensor::new(&[o_rows, n_z], obs).unwrap())
}

/// Records the ELBO of `batch` on `g`, drawing all noise from `rng`.
pub fn elbo_g(g: &mut Graph, p: &Bound, model: &SdeModel, batch: &ElboBatch, rng: &mut Rng) -> Result<ElboVars> {
    let ops = &model.scales;
    let n_z = model.n_z();
    let (xi_quad, xi_obs) = segment_noise(batch, n_z, rng);
    let rows = batch.anchors.shape()[0];
    let q_rows = batch.quad_t.shape()[0];

    let y = g.constant(batch.anchors.clone());
    let anchors = ops.encode_g(g, p, y)?;
    let var_z = ops.sigma_z_g(g, p)?;
    let log_var = g.log(var_z)?;
    let log_var_rows = g.broadcast_rows(log_var, rows)?;

    let w = g.constant(batch.w.clone());
    let dw = g.constant(batch.dw.clone());
    let mu = g.matmul(w, anchors)?;
    let mu_dot = g.matmul(dw, anchors)?;
    let lv = g.matmul(w, log_var_rows)?;
    let lv_dot = g.matmul(dw, log_var_rows)?;
    let sigma = g.exp(lv)?;
    let sigma_dot = g.mul(sigma, lv_dot)?;
    let sd = g.sqrt(sigma)?;

    let xi = g.constant(xi_quad);
    let dz = g.mul(sd, xi)?;
    let z = g.add(mu, dz)?;
    let t = g.constant(batch.quad_t.clone());
    let gamma = model.drift_g(g, p, z, t)?;

    let ell = model.dispersion_g(g, p)?;
    let ell2 = g.square(ell)?;
    let ell2 = g.broadcast_rows(ell2, q_rows)?;
    let num = g.sub(ell2, sigma_dot)?;
    let den = g.scale(sigma, 2.0)?;
    let b = g.div(num, den)?;
    let b_dz = g.mul(b, dz)?;
    let r = g.sub(mu_dot, b_dz)?;
    let r = g.sub(r, gamma)?;
    let r2 = g.square(r)?;
    let weighted = g.div(r2, ell2)?;
    let per_node = g.sum_last(weighted)?;
    let qw = g.constant(batch.quad_w.clone());
    let integral_rows = g.mul(per_node, qw)?;
    let integral = g.sum(integral_rows)?;

    // Observation terms use the encoder marginal at the anchor itself.
    let idx: Vec<i64> = batch.obs_rows.iter().flat_map(|&r| (0..n_z).map(move |i| (r * n_z + i) as i64)).collect();
    let n_obs = batch.obs_rows.len();
    let z_anchor = g.gather(anchors, Arc::new(idx), &[n_obs, n_z])?;
    let sd_z = g.sqrt(var_z)?;
    let sd_z = g.broadcast_rows(sd_z, n_obs)?;
    let xi_obs = g.constant(xi_obs);
    let noise = g.mul(sd_z, xi_obs)?;
    let z_obs = g.add(z_anchor, noise)?;
    let n_y = batch.anchors.shape()[1];
    let y_obs: Vec<f64> = batch.obs_rows.iter().flat_map(|&r| batch.anchors.row(r).iter().copied()).collect();
    let y_obs = g.constant(Tensor::new(&[n_obs, n_y], y_obs)?);
    let ll = poe_loglik_g(g, p, ops, y_obs, z_obs)?;
    let loglik_rows = g.scale(ll, 1.0 / batch.n_mc as f64)?;
    let loglik = g.sum(loglik_rows)?;

    let half = g.scale(integral, -0.5)?;
    let total = g.add(loglik, half)?;
    Ok(ElboVars { total, loglik, integral, loglik_rows, integral_rows })
}

/// Reads the terms off a recorded graph, naming the first segment that produced
/// a non-finite value.
pub fn read_terms(g: &Graph, batch: &ElboBatch, vars: &ElboVars) -> Result<ElboTerms> {
    let terms = ElboTerms {
        loglik: g.value(vars.loglik).item(),
        integral: g.value(vars.integral).item(),
        total: g.value(vars.total).item(),
    };
    if terms.total.is_finite() {
        return Ok(terms);
    }
    let bad_obs = g.value(vars.loglik_rows).data().iter().position(|v| !v.is_finite()).map(|i| batch.obs_segment[i]);
    let bad_quad = g.value(vars.integral_rows).data().iter().position(|v| !v.is_finite()).map(|i| batch.quad_segment[i]);
    let k = bad_obs.into_iter().chain(bad_quad).min().unwrap_or(0);
    let (traj, seg) = batch.labels[k];
    Err(Error::NonFinite(format!("ELBO of trajectory {traj} segment {seg}")))
}

/// ELBO value for fixed parameters.
pub fn elbo(model: &SdeModel, params: &ParamStore, batch: &ElboBatch, rng: &mut Rng) -> Result<ElboTerms> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let vars = elbo_g(&mut g, &p, model, batch, rng)?;
    read_terms(&g, batch, &vars)
}
