//! Product-of-experts Gaussian likelihood linking latent states to observations.

use crate::compute::{param, Block, Bound, Graph, Init, ParamSpec, ParamStore, Tensor, Var};
use crate::scales::ScaleOps;
use crate::{invalid, Result};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal precisions of the macroscale and microscale experts.
#[derive(Clone, Debug, PartialEq)]
pub struct PoeParams {
    pub s_zeta: Vec<f64>,
    pub s_eta: Vec<f64>,
}

impl PoeParams {
    pub fn new(s_zeta: Vec<f64>, s_eta: Vec<f64>) -> Result<Self> {
        if s_zeta.len() != s_eta.len() {
            return invalid(format!("precision lengths {} and {} differ", s_zeta.len(), s_eta.len()));
        }
        if let Some(bad) = s_zeta.iter().chain(&s_eta).find(|&&s| !(s > 0.0 && s.is_finite())) {
            return invalid(format!("precision must be positive and finite, got {bad}"));
        }
        Ok(Self { s_zeta, s_eta })
    }

    /// Parameters `poe.log_s_zeta` and `poe.log_s_eta`, both `[n_y]`.
    pub fn param_specs(n_y: usize, init_precision: f64) -> Vec<ParamSpec> {
        let init = Init::Const(init_precision.ln());
        ["poe.log_s_zeta", "poe.log_s_eta"]
            .into_iter()
            .map(|name| ParamSpec::new(name, vec![vec![Block::Fixed(n_y)]], init.clone()))
            .collect()
    }

    pub fn from_store(params: &ParamStore) -> Result<Self> {
        let get = |name: &str| match params.get(name) {
            Some(t) => Ok(t.data().iter().map(|v| v.exp()).collect::<Vec<_>>()),
            None => invalid(format!("missing parameter {name}")),
        };
        Self::new(get("poe.log_s_zeta")?, get("poe.log_s_eta")?)
    }

    pub fn n_y(&self) -> usize {
        self.s_zeta.len()
    }

    fn zip(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.s_zeta.iter().zip(&self.s_eta).map(|(&a, &b)| f(a, b)).collect()
    }

    /// Shared reconstruction covariance `(S^zeta + S^eta)^{-1}`.
    pub fn sigma_y(&self) -> Vec<f64> {
        self.zip(|a, b| 1.0 / (a + b))
    }

    /// `S^eta (S^eta + S^zeta)^{-1} S^zeta`.
    pub fn lambda(&self) -> Vec<f64> {
        self.zip(|a, b| b * a / (a + b))
    }

    /// `S^eta (S^eta + S^zeta)^{-1} S^eta`.
    pub fn lambda_prime(&self) -> Vec<f64> {
        self.zip(|a, b| b * b / (a + b))
    }

    /// Weight `S^eta / (S^zeta + S^eta)` on the microscale decoder output.
    pub fn micro_weight(&self) -> Vec<f64> {
        self.zip(|a, b| b / (a + b))
    }

    fn log_norm(&self) -> f64 {
        let logdet: f64 = self.zip(|a, b| (a + b).ln()).iter().sum();
        -0.5 * self.n_y() as f64 * LOG_2PI + 0.5 * logdet
    }
}

/// Conditional Gaussian `p(y | z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reconstruction {
    pub mean: Tensor,
    pub cov: Vec<f64>,
}

fn check_len(what: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return invalid(format!("{what} has length {}, expected {n}", v.len()));
    }
    Ok(())
}

/// Log-likelihood from the macroscale residual `r = y - prolong(zeta)` and the
/// microscale decoder output `d`, in the three-quadratic-form arrangement.
pub fn loglik_from_parts(r: &[f64], d: &[f64], poe: &PoeParams) -> Result<f64> {
    check_len("residual", r, poe.n_y())?;
    check_len("micro output", d, poe.n_y())?;
    let lam = poe.lambda();
    let mut q = 0.0;
    for i in 0..r.len() {
        let e = r[i] - d[i];
        q += poe.s_zeta[i] * r[i] * r[i] + poe.s_eta[i] * e * e - lam[i] * d[i] * d[i];
    }
    Ok(-0.5 * q + poe.log_norm())
}

/// Same value as [`loglik_from_parts`], arranged as a precision-weighted fit,
/// a cross term, and the `Lambda'` penalty on the microscale output.
pub fn loglik_from_parts_expanded(r: &[f64], d: &[f64], poe: &PoeParams) -> Result<f64> {
    check_len("residual", r, poe.n_y())?;
    check_len("micro output", d, poe.n_y())?;
    let lp = poe.lambda_prime();
    let (mut fit, mut cross, mut pen) = (0.0, 0.0, 0.0);
    for i in 0..r.len() {
        fit += (poe.s_zeta[i] + poe.s_eta[i]) * r[i] * r[i];
        cross += poe.s_eta[i] * r[i] * d[i];
        pen += lp[i] * d[i] * d[i];
    }
    Ok(-0.5 * fit + cross - 0.5 * pen + poe.log_norm())
}

fn parts(ops: &ScaleOps, params: &ParamStore, y: &Tensor, zeta: &Tensor, eta: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len("y", y.data(), ops.n_y())?;
    let macro_mean = ops.prolong(params, zeta)?;
    let r: Vec<f64> = y.data().iter().zip(macro_mean.data()).map(|(a, b)| a - b).collect();
    let d = ops.decode_micro(params, eta)?;
    Ok((r, d.into_data()))
}

/// `log p(y | zeta, eta)` for a single state, normalising constants included.
pub fn poe_loglik(
    ops: &ScaleOps,
    params: &ParamStore,
    poe: &PoeParams,
    y: &Tensor,
    zeta: &Tensor,
    eta: &Tensor,
) -> Result<f64> {
    let (r, d) = parts(ops, params, y, zeta, eta)?;
    loglik_from_parts(&r, &d, poe)
}

pub fn poe_loglik_expanded(
    ops: &ScaleOps,
    params: &ParamStore,
    poe: &PoeParams,
    y: &Tensor,
    zeta: &Tensor,
    eta: &Tensor,
) -> Result<f64> {
    let (r, d) = parts(ops, params, y, zeta, eta)?;
    loglik_from_parts_expanded(&r, &d, poe)
}

/// Mean `prolong(zeta) + Sigma_y S^eta decode(eta)` and covariance `Sigma_y`.
/// `z` is `[n_z]` or `[batch, n_z]`.
pub fn reconstruct(ops: &ScaleOps, params: &ParamStore, poe: &PoeParams, z: &Tensor) -> Result<Reconstruction> {
    check_len("precisions", &poe.s_zeta, ops.n_y())?;
    let single = z.shape().len() == 1;
    let z2 = if single { z.clone().reshape(&[1, z.len()])? } else { z.clone() };
    if z2.shape().len() != 2 || z2.shape()[1] != ops.n_z() {
        return invalid(format!("latent state {:?} does not match n_z={}", z.shape(), ops.n_z()));
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let zv = g.constant(z2);
    let w = g.constant(Tensor::vector(poe.micro_weight()));
    let mean = reconstruct_mean_g(&mut g, &p, ops, zv, w)?;
    let mean = g.value(mean).clone();
    let mean = if single { mean.reshape(&[ops.n_y()])? } else { mean };
    Ok(Reconstruction { mean, cov: poe.sigma_y() })
}

fn split_z(g: &mut Graph, ops: &ScaleOps, z: Var) -> Result<(Var, Var)> {
    let n_zeta = ops.n_zeta();
    let zeta = g.slice(z, 1, 0, n_zeta)?;
    let eta = g.slice(z, 1, n_zeta, ops.n_z())?;
    Ok((zeta, eta))
}

/// Mean of the reconstruction for `z: [batch, n_z]` given the micro weight `w: [n_y]`.
fn reconstruct_mean_g(g: &mut Graph, p: &Bound, ops: &ScaleOps, z: Var, w: Var) -> Result<Var> {
    let (zeta, eta) = split_z(g, ops, z)?;
    let m = ops.prolong_g(g, p, zeta)?;
    if ops.n_eta == 0 {
        return Ok(m);
    }
    let d = ops.decode_micro_g(g, p, eta)?;
    let rows = g.shape(z)[0];
    let wb = g.broadcast_rows(w, rows)?;
    let wd = g.mul(wb, d)?;
    Ok(g.add(m, wd)?)
}

/// Per-row `log p(y | z)` for `y: [batch, n_y]`, `z: [batch, n_z]`, using the
/// precisions stored in `p`. Returns `[batch]`.
pub fn poe_loglik_g(g: &mut Graph, p: &Bound, ops: &ScaleOps, y: Var, z: Var) -> Result<Var> {
    let rows = g.shape(y)[0];
    let n_y = ops.n_y();
    let s_zeta = param(p, "poe.log_s_zeta")?;
    let s_eta = param(p, "poe.log_s_eta")?;
    let s_zeta = g.exp(s_zeta)?;
    let s_eta = g.exp(s_eta)?;
    let total = g.add(s_zeta, s_eta)?;
    let w = g.div(s_eta, total)?;
    // Completing the square: the normalised product is N(mu_y, Sigma_y).
    let mean = reconstruct_mean_g(g, p, ops, z, w)?;
    let r = g.sub(y, mean)?;
    let r2 = g.square(r)?;
    let tb = g.broadcast_rows(total, rows)?;
    let q = g.mul(r2, tb)?;
    let q = g.sum_last(q)?;
    let log_total = g.log(total)?;
    let logdet = g.sum(log_total)?;
    let c = g.scale(logdet, 0.5)?;
    let c = g.add_scalar(c, -0.5 * n_y as f64 * LOG_2PI)?;
    let c = g.reshape(c, &[1])?;
    let c = g.broadcast(c, 1, rows, &[rows])?;
    let half_q = g.scale(q, -0.5)?;
    Ok(g.add(half_q, c)?)
}
