//! Layer helpers on top of [`Graph`].

use std::collections::BTreeMap;

use super::{Block, ComputeError, Graph, Init, ParamSpec, Tensor, Var, LEAKY_SLOPE};

/// Parameter leaves of one graph, by name.
pub type Bound = BTreeMap<String, Var>;

pub fn param(p: &Bound, name: &str) -> Result<Var, ComputeError> {
    p.get(name).copied().ok_or_else(|| ComputeError::Unbound(name.to_string()))
}

/// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var, ComputeError> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => {
            let rows = g.shape(y)[0];
            let bb = g.broadcast_rows(b, rows)?;
            g.add(y, bb)
        }
        None => Ok(y),
    }
}

/// Adds a per-channel bias `b: [c]` to `x: [batch, c, len]`.
pub fn channel_bias(g: &mut Graph, x: Var, b: Var) -> Result<Var, ComputeError> {
    let shape = g.shape(x).to_vec();
    let bb = g.broadcast(b, shape[0], shape[2], &shape)?;
    g.add(x, bb)
}

/// Specs for a dense stack `widths[0] -> widths[1] -> ... -> widths[last]`.
pub fn mlp_specs(prefix: &str, widths: &[Vec<Block>]) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        out.push(ParamSpec::new(format!("{prefix}.w{i}"), vec![pair[0].clone(), pair[1].clone()], Init::Xavier));
        out.push(ParamSpec::new(format!("{prefix}.b{i}"), vec![pair[1].clone()], Init::Zeros));
    }
    out
}

/// Dense stack with LeakyReLU between layers and a linear output.
pub fn mlp(g: &mut Graph, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var, ComputeError> {
    let mut h = x;
    for i in 0..layers {
        let w = param(p, &format!("{prefix}.w{i}"))?;
        let b = param(p, &format!("{prefix}.b{i}"))?;
        h = linear(g, h, w, Some(b))?;
        if i + 1 < layers {
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
        }
    }
    Ok(h)
}

/// `[rows, 0]` placeholder used when the microscale is absent.
pub fn empty_rows(g: &mut Graph, rows: usize) -> Var {
    g.constant(Tensor::zeros(&[rows, 0]))
}
