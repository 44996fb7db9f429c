//! Index geometry shared by strided convolution and its transpose.
//!
//! A convolution over `d` spatial axes is lowered to a gather table: for each
//! output position and kernel tap the table holds the flat input position it
//! reads, or `-1` where zero padding applies. Forward convolution and the
//! transposed convolution (its exact adjoint) both walk the same table.

use serde::{Deserialize, Serialize};

use super::tensor::gemm;
use super::ComputeError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Indices wrap around the axis.
    Circular,
    /// Out-of-range taps read zero.
    Zero,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_dims: Vec<usize>,
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
    pub out_dims: Vec<usize>,
    table: Vec<i64>,
}

impl ConvGeometry {
    pub fn new(
        in_dims: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: usize,
        mode: Padding,
    ) -> Result<Self, ComputeError> {
        let bad = |detail: String| ComputeError::Shape { node: "conv".into(), detail };
        if in_dims.len() != kernel.len() || in_dims.is_empty() || in_dims.len() > 2 {
            return Err(bad(format!("input dims {in_dims:?} vs kernel {kernel:?}")));
        }
        if stride == 0 {
            return Err(bad("stride must be positive".into()));
        }
        let mut out_dims = Vec::with_capacity(in_dims.len());
        for (&n, &k) in in_dims.iter().zip(kernel) {
            if n + 2 * padding < k {
                return Err(bad(format!("kernel {k} larger than padded input {n}+2*{padding}")));
            }
            out_dims.push((n + 2 * padding - k) / stride + 1);
        }
        let n_out: usize = out_dims.iter().product();
        let n_taps: usize = kernel.iter().product();
        let mut table = Vec::with_capacity(n_out * n_taps);
        let resolve = |o: usize, j: usize, n: usize| -> Option<usize> {
            let pos = (o * stride + j) as i64 - padding as i64;
            match mode {
                Padding::Circular => Some(pos.rem_euclid(n as i64) as usize),
                Padding::Zero => (pos >= 0 && pos < n as i64).then_some(pos as usize),
            }
        };
        if in_dims.len() == 1 {
            for o in 0..out_dims[0] {
                for j in 0..kernel[0] {
                    table.push(resolve(o, j, in_dims[0]).map_or(-1, |p| p as i64));
                }
            }
        } else {
            for o0 in 0..out_dims[0] {
                for o1 in 0..out_dims[1] {
                    for j0 in 0..kernel[0] {
                        for j1 in 0..kernel[1] {
                            let idx = match (resolve(o0, j0, in_dims[0]), resolve(o1, j1, in_dims[1])) {
                                (Some(a), Some(b)) => (a * in_dims[1] + b) as i64,
                                _ => -1,
                            };
                            table.push(idx);
                        }
                    }
                }
            }
        }
        Ok(Self {
            in_dims: in_dims.to_vec(),
            kernel: kernel.to_vec(),
            stride,
            padding,
            mode,
            out_dims,
            table,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// im2col for one sample: `cols[p, ci * taps + t]`.
    fn gather_cols(&self, x: &[f64], c_in: usize, cols: &mut [f64]) {
        let (p_n, taps, l) = (self.out_len(), self.taps(), self.in_len());
        let j_n = c_in * taps;
        for p in 0..p_n {
            let row = &mut cols[p * j_n..(p + 1) * j_n];
            let tab = &self.table[p * taps..(p + 1) * taps];
            for ci in 0..c_in {
                let xs = &x[ci * l..(ci + 1) * l];
                for (t, &idx) in tab.iter().enumerate() {
                    row[ci * taps + t] = if idx < 0 { 0.0 } else { xs[idx as usize] };
                }
            }
        }
    }

    /// col2im for one sample, accumulating into `x`.
    fn scatter_cols(&self, cols: &[f64], c_in: usize, x: &mut [f64]) {
        let (p_n, taps, l) = (self.out_len(), self.taps(), self.in_len());
        let j_n = c_in * taps;
        for p in 0..p_n {
            let row = &cols[p * j_n..(p + 1) * j_n];
            let tab = &self.table[p * taps..(p + 1) * taps];
            for ci in 0..c_in {
                let xs = &mut x[ci * l..(ci + 1) * l];
                for (t, &idx) in tab.iter().enumerate() {
                    if idx >= 0 {
                        xs[idx as usize] += row[ci * taps + t];
                    }
                }
            }
        }
    }

    /// `x: [batch, c_in, in_len]`, `w: [c_out, c_in, taps]` -> `[batch, c_out, out_len]`.
    pub fn conv(&self, x: &[f64], w: &[f64], batch: usize, c_in: usize, c_out: usize) -> Vec<f64> {
        let (p_n, l) = (self.out_len(), self.in_len());
        let j_n = c_in * self.taps();
        let mut out = vec![0.0; batch * c_out * p_n];
        let mut cols = vec![0.0; p_n * j_n];
        for b in 0..batch {
            self.gather_cols(&x[b * c_in * l..(b + 1) * c_in * l], c_in, &mut cols);
            // out[b] (c_out x P) = w (c_out x J) * cols^T (J x P)
            gemm(
                c_out,
                j_n,
                p_n,
                w,
                (j_n as isize, 1),
                &cols,
                (1, j_n as isize),
                &mut out[b * c_out * p_n..(b + 1) * c_out * p_n],
                (p_n as isize, 1),
                0.0,
            );
        }
        out
    }

    /// Adjoint of [`conv`](Self::conv) in `x`: `y: [batch, c_out, out_len]` -> `[batch, c_in, in_len]`.
    pub fn conv_adjoint(&self, y: &[f64], w: &[f64], batch: usize, c_in: usize, c_out: usize) -> Vec<f64> {
        let (p_n, l) = (self.out_len(), self.in_len());
        let j_n = c_in * self.taps();
        let mut out = vec![0.0; batch * c_in * l];
        let mut cols = vec![0.0; p_n * j_n];
        for b in 0..batch {
            // cols (P x J) = y[b]^T (P x c_out) * w (c_out x J)
            gemm(
                p_n,
                c_out,
                j_n,
                &y[b * c_out * p_n..(b + 1) * c_out * p_n],
                (1, p_n as isize),
                w,
                (j_n as isize, 1),
                &mut cols,
                (j_n as isize, 1),
                0.0,
            );
            self.scatter_cols(&cols, c_in, &mut out[b * c_in * l..(b + 1) * c_in * l]);
        }
        out
    }

    /// Gradient of `<y, conv(x, w)>` with respect to `w`, accumulated into `dw`.
    pub fn conv_weight_grad(
        &self,
        x: &[f64],
        y: &[f64],
        batch: usize,
        c_in: usize,
        c_out: usize,
        dw: &mut [f64],
    ) {
        let (p_n, l) = (self.out_len(), self.in_len());
        let j_n = c_in * self.taps();
        let mut cols = vec![0.0; p_n * j_n];
        for b in 0..batch {
            self.gather_cols(&x[b * c_in * l..(b + 1) * c_in * l], c_in, &mut cols);
            // dw (c_out x J) += y[b] (c_out x P) * cols (P x J)
            gemm(
                c_out,
                p_n,
                j_n,
                &y[b * c_out * p_n..(b + 1) * c_out * p_n],
                (p_n as isize, 1),
                &cols,
                (j_n as isize, 1),
                dw,
                (j_n as isize, 1),
                1.0,
            );
        }
    }
}
