//! Scale separation: learned smoothing, tied restriction/prolongation, and the
//! microscale convolutional encoder/decoder.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::compute::{
    channel_bias, empty_rows, linear, param, Block, Bound, ConvGeometry, Graph, Init, Padding, ParamSpec, ParamStore,
    Tensor, Var, LEAKY_SLOPE,
};
use crate::datagen::GridSpec;
use crate::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub grid: GridSpec,
    /// Coarse points per axis.
    pub coarse: Vec<usize>,
    /// Smoothing kernel length is `kernel_factor * s + 1` per axis, padding `kernel_factor * s / 2`.
    pub kernel_factor: usize,
    /// Channels of the microscale conv stack (each layer halves the grid).
    pub micro_filters: Vec<usize>,
    /// Kernel length per axis of the microscale convolutions.
    pub micro_kernel: usize,
    /// Initial diagonal of the encoder covariance.
    pub init_sigma_z: f64,
}

/// Mean and diagonal covariance of `p(z | y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedGaussian {
    /// `[batch, n_z]`, or `[n_z]` when encoding a single state.
    pub mean: Tensor,
    pub cov: Tensor,
}

/// Inverse of `softplus`, used to store positive quantities unconstrained.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Normalised Gaussian weights of width `s` over `len` taps, as a product over axes.
pub fn gaussian_kernel(len: usize, dims: usize, s: f64) -> Vec<f64> {
    let c = (len - 1) as f64 / 2.0;
    let g1: Vec<f64> = (0..len).map(|j| (-((j as f64 - c) / s).powi(2) / 2.0).exp()).collect();
    let mut k = g1.clone();
    if dims == 2 {
        k = g1.iter().flat_map(|a| g1.iter().map(move |b| a * b)).collect();
    }
    let total: f64 = k.iter().sum();
    k.iter().map(|v| v / total).collect()
}

#[derive(Clone, Debug)]
pub struct ScaleOps {
    pub config: ScaleConfig,
    pub factor: usize,
    pub n_eta: usize,
    smooth_geom: Arc<ConvGeometry>,
    restrict_geom: Arc<ConvGeometry>,
    micro_geoms: Vec<Arc<ConvGeometry>>,
}

impl ScaleOps {
    pub fn new(config: ScaleConfig, n_eta: usize) -> Result<Self> {
        config.grid.validate()?;
        let factor = config.grid.factor_to(&config.coarse)?;
        let d = config.grid.dim();
        let len = config.kernel_factor * factor + 1;
        let pad = config.kernel_factor * factor / 2;
        if config.kernel_factor % 2 != 0 {
            return invalid("kernel factor must be even so the smoothing kernel is centred");
        }
        let mode = if config.grid.periodic { Padding::Circular } else { Padding::Zero };
        let fine = &config.grid.points;
        let smooth_geom = Arc::new(ConvGeometry::new(fine, &vec![len; d], 1, pad, mode)?);
        let restrict_geom = Arc::new(ConvGeometry::new(fine, &vec![len; d], factor, pad, mode)?);
        if restrict_geom.out_dims != config.coarse {
            return invalid(format!(
                "restriction of {fine:?} with stride {factor} gives {:?}, expected {:?}",
                restrict_geom.out_dims, config.coarse
            ));
        }
        if config.micro_kernel % 2 == 0 {
            return invalid("microscale kernel length must be odd");
        }
        let mut micro_geoms = Vec::new();
        let mut dims = fine.clone();
        for _ in &config.micro_filters {
            let k = config.micro_kernel;
            let g = ConvGeometry::new(&dims, &vec![k; d], 2, k / 2, Padding::Circular)?;
            dims = g.out_dims.clone();
            micro_geoms.push(Arc::new(g));
        }
        if !(config.init_sigma_z > 0.0) {
            return invalid("initial encoder variance must be positive");
        }
        Ok(Self { config, factor, n_eta, smooth_geom, restrict_geom, micro_geoms })
    }

    pub fn fields(&self) -> usize {
        self.config.grid.fields
    }

    pub fn n_y(&self) -> usize {
        self.config.grid.n_y()
    }

    pub fn n_zeta(&self) -> usize {
        self.fields() * self.config.coarse.iter().product::<usize>()
    }

    pub fn n_z(&self) -> usize {
        self.n_zeta() + self.n_eta
    }

    pub fn kernel_len(&self) -> usize {
        self.smooth_geom.taps()
    }

    fn fine_len(&self) -> usize {
        self.smooth_geom.in_len()
    }

    /// Flattened feature count entering the microscale linear layer.
    pub fn micro_features(&self) -> usize {
        match (self.micro_geoms.last(), self.config.micro_filters.last()) {
            (Some(g), Some(&c)) => c * g.out_len(),
            _ => self.n_y(),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.config.grid.dim();
        let taps = self.kernel_len();
        let side = self.config.kernel_factor * self.factor + 1;
        let kernel = gaussian_kernel(side, d, self.factor as f64);
        let mut specs: Vec<ParamSpec> = (0..self.fields())
            .map(|f| ParamSpec::fixed(format!("scale.kernel{f}"), &[1, 1, taps], Init::Values(kernel.clone())))
            .collect();
        specs.push(ParamSpec::new(
            "enc.sigma_z",
            vec![vec![Block::Fixed(self.n_zeta()), Block::Eta]],
            Init::Const(softplus_inv(self.config.init_sigma_z)),
        ));
        if self.n_eta == 0 {
            return specs;
        }
        let mut c_in = self.fields();
        for (i, (geom, &c_out)) in self.micro_geoms.iter().zip(&self.config.micro_filters).enumerate() {
            let t = geom.taps();
            specs.push(ParamSpec::fixed(format!("micro_enc.conv{i}.w"), &[c_out, c_in, t], Init::Xavier));
            specs.push(ParamSpec::fixed(format!("micro_enc.conv{i}.b"), &[c_out], Init::Zeros));
            // Decoder layer i maps c_out channels back to c_in.
            specs.push(ParamSpec::fixed(format!("micro_dec.convt{i}.w"), &[c_out, c_in, t], Init::Xavier));
            specs.push(ParamSpec::fixed(format!("micro_dec.convt{i}.b"), &[c_in], Init::Zeros));
            c_in = c_out;
        }
        let feat = vec![Block::Fixed(self.micro_features())];
        let eta = vec![Block::Eta];
        specs.push(ParamSpec::new("micro_enc.lin.w", vec![feat.clone(), eta.clone()], Init::Xavier));
        specs.push(ParamSpec::new("micro_enc.lin.b", vec![eta.clone()], Init::Zeros));
        specs.push(ParamSpec::new("micro_dec.lin.w", vec![eta, feat.clone()], Init::Xavier));
        specs.push(ParamSpec::new("micro_dec.lin.b", vec![feat], Init::Zeros));
        specs
    }

    fn check_rows(&self, g: &Graph, x: Var, width: usize, what: &str) -> Result<usize> {
        match g.shape(x) {
            [b, w] if *w == width => Ok(*b),
            s => invalid(format!("{what} expects [batch, {width}], got {s:?}")),
        }
    }

    /// Applies per-field convolution `geom` with the shared kernels; `x: [batch, fields * in_len]`.
    fn kernel_conv(&self, g: &mut Graph, p: &Bound, x: Var, geom: &Arc<ConvGeometry>, transpose: bool) -> Result<Var> {
        let (f, (l_in, l_out)) = (self.fields(), if transpose { (geom.out_len(), geom.in_len()) } else { (geom.in_len(), geom.out_len()) });
        let b = self.check_rows(g, x, f * l_in, "scale operator")?;
        let x3 = g.reshape(x, &[b, f, l_in])?;
        let mut outs = Vec::with_capacity(f);
        for field in 0..f {
            let k = param(p, &format!("scale.kernel{field}"))?;
            let xf = if f == 1 { x3 } else { g.slice(x3, 1, field, field + 1)? };
            let y = if transpose { g.conv_transpose(xf, k, geom.clone())? } else { g.conv(xf, k, geom.clone())? };
            outs.push(y);
        }
        let y = if f == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok(g.reshape(y, &[b, f * l_out])?)
    }

    /// `y: [batch, n_y]` -> smoothed `[batch, n_y]`.
    pub fn smooth_g(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let geom = self.smooth_geom.clone();
        self.kernel_conv(g, p, y, &geom, false)
    }

    pub fn residual_g(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let s = self.smooth_g(g, p, y)?;
        Ok(g.sub(y, s)?)
    }

    /// `[batch, n_y]` -> `[batch, n_zeta]`.
    pub fn restrict_g(&self, g: &mut Graph, p: &Bound, ybar: Var) -> Result<Var> {
        let geom = self.restrict_geom.clone();
        self.kernel_conv(g, p, ybar, &geom, false)
    }

    /// `[batch, n_zeta]` -> `[batch, n_y]`, the adjoint of restriction.
    pub fn prolong_g(&self, g: &mut Graph, p: &Bound, zeta: Var) -> Result<Var> {
        let geom = self.restrict_geom.clone();
        self.kernel_conv(g, p, zeta, &geom, true)
    }

    /// `[batch, n_y]` residual -> `[batch, n_eta]`.
    pub fn encode_micro_g(&self, g: &mut Graph, p: &Bound, ytilde: Var) -> Result<Var> {
        let b = self.check_rows(g, ytilde, self.n_y(), "microscale encoder")?;
        if self.n_eta == 0 {
            return Ok(empty_rows(g, b));
        }
        let mut h = g.reshape(ytilde, &[b, self.fields(), self.fine_len()])?;
        for (i, geom) in self.micro_geoms.iter().enumerate() {
            let w = param(p, &format!("micro_enc.conv{i}.w"))?;
            let bias = param(p, &format!("micro_enc.conv{i}.b"))?;
            h = g.conv(h, w, geom.clone())?;
            h = channel_bias(g, h, bias)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let h = g.reshape(h, &[b, self.micro_features()])?;
        let (w, bias) = (param(p, "micro_enc.lin.w")?, param(p, "micro_enc.lin.b")?);
        Ok(linear(g, h, w, Some(bias))?)
    }

    /// `[batch, n_eta]` -> `[batch, n_y]`; zero when the microscale is absent.
    pub fn decode_micro_g(&self, g: &mut Graph, p: &Bound, eta: Var) -> Result<Var> {
        let b = self.check_rows(g, eta, self.n_eta, "microscale decoder")?;
        if self.n_eta == 0 {
            return Ok(g.constant(Tensor::zeros(&[b, self.n_y()])));
        }
        let (w, bias) = (param(p, "micro_dec.lin.w")?, param(p, "micro_dec.lin.b")?);
        let mut h = linear(g, eta, w, Some(bias))?;
        let layers = self.micro_geoms.len();
        if layers == 0 {
            return Ok(h);
        }
        h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let last = &self.micro_geoms[layers - 1];
        h = g.reshape(h, &[b, self.config.micro_filters[layers - 1], last.out_len()])?;
        for i in (0..layers).rev() {
            let w = param(p, &format!("micro_dec.convt{i}.w"))?;
            let bias = param(p, &format!("micro_dec.convt{i}.b"))?;
            h = g.conv_transpose(h, w, self.micro_geoms[i].clone())?;
            h = channel_bias(g, h, bias)?;
            if i > 0 {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(g.reshape(h, &[b, self.n_y()])?)
    }

    /// Positive encoder variances `[n_z]`.
    pub fn sigma_z_g(&self, g: &mut Graph, p: &Bound) -> Result<Var> {
        let raw = param(p, "enc.sigma_z")?;
        Ok(g.softplus(raw)?)
    }

    /// Encoder mean `[batch, n_z] = [restrict(smooth(y)), encode_micro(residual(y))]`.
    pub fn encode_g(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        let ybar = self.smooth_g(g, p, y)?;
        let zeta = self.restrict_g(g, p, ybar)?;
        if self.n_eta == 0 {
            return Ok(zeta);
        }
        let ytilde = g.sub(y, ybar)?;
        let eta = self.encode_micro_g(g, p, ytilde)?;
        Ok(g.concat(&[zeta, eta], 1)?)
    }

    fn apply(
        &self,
        params: &ParamStore,
        x: &Tensor,
        width: usize,
        f: impl FnOnce(&Self, &mut Graph, &Bound, Var) -> Result<Var>,
    ) -> Result<Tensor> {
        let single = x.shape().len() == 1;
        let x2 = if single { x.clone().reshape(&[1, x.len()])? } else { x.clone() };
        if x2.shape().len() != 2 || x2.shape()[1] != width {
            return invalid(format!("expected [{width}] or [batch, {width}], got {:?}", x.shape()));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xv = g.constant(x2);
        let out = f(self, &mut g, &p, xv)?;
        let v = g.value(out).clone();
        Ok(if single { v.reshape(&[g.shape(out)[1]])? } else { v })
    }

    pub fn smooth(&self, params: &ParamStore, y: &Tensor) -> Result<Tensor> {
        self.apply(params, y, self.n_y(), Self::smooth_g)
    }

    pub fn residual(&self, params: &ParamStore, y: &Tensor) -> Result<Tensor> {
        self.apply(params, y, self.n_y(), Self::residual_g)
    }

    pub fn restrict(&self, params: &ParamStore, ybar: &Tensor) -> Result<Tensor> {
        self.apply(params, ybar, self.n_y(), Self::restrict_g)
    }

    pub fn prolong(&self, params: &ParamStore, zeta: &Tensor) -> Result<Tensor> {
        self.apply(params, zeta, self.n_zeta(), Self::prolong_g)
    }

    pub fn encode_micro(&self, params: &ParamStore, ytilde: &Tensor) -> Result<Tensor> {
        self.apply(params, ytilde, self.n_y(), Self::encode_micro_g)
    }

    pub fn decode_micro(&self, params: &ParamStore, eta: &Tensor) -> Result<Tensor> {
        self.apply(params, eta, self.n_eta, Self::decode_micro_g)
    }

    pub fn encode(&self, params: &ParamStore, y: &Tensor) -> Result<EncodedGaussian> {
        let mean = self.apply(params, y, self.n_y(), Self::encode_g)?;
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let cov = self.sigma_z_g(&mut g, &p)?;
        Ok(EncodedGaussian { mean, cov: g.value(cov).clone() })
    }
}
