//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records itself; nodes are stored in
//! creation order, which is a topological order. [`Graph::backward`] walks the
//! nodes in reverse and accumulates exact vector-Jacobian products.
//! [`Graph::forward`] replays the recorded operations with rebound leaves.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::conv::ConvGeometry;
use super::tensor::{gemm, Tensor};
use super::ComputeError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Constant,
    Input(String),
    Param(String),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Sum(Var),
    SumLast(Var),
    Reshape(Var, Vec<usize>),
    /// `[k] -> [outer, k, inner]` (output shape stored explicitly).
    Broadcast { x: Var, outer: usize, inner: usize, shape: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, idx: Arc<Vec<i64>>, shape: Vec<usize> },
    Conv { x: Var, w: Var, geom: Arc<ConvGeometry> },
    ConvTranspose { y: Var, w: Var, geom: Arc<ConvGeometry> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add-scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::MatMul { .. } => "matmul",
            Op::Sum(_) => "reduce-sum",
            Op::SumLast(_) => "reduce-sum-last",
            Op::Reshape(..) => "reshape",
            Op::Broadcast { .. } => "broadcast",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Conv { .. } => "conv",
            Op::ConvTranspose { .. } => "conv-transpose",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients returned by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero-shaped `None` when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn mat_dims(t: &Tensor, transposed: bool) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some(if transposed { (*c, *r) } else { (*r, *c) }),
        _ => None,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf_kind(&self, v: Var) -> Option<&LeafKind> {
        match &self.nodes[v.0].op {
            Op::Leaf(k) => Some(k),
            _ => None,
        }
    }

    fn push_leaf(&mut self, kind: LeafKind, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf(kind), value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(LeafKind::Constant, value)
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.push_leaf(LeafKind::Input(name.to_string()), value)
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.push_leaf(LeafKind::Param(name.to_string()), value)
    }

    fn err(&self, index: usize, op: &Op, detail: String) -> ComputeError {
        ComputeError::Shape { node: format!("#{index} ({})", op.name()), detail }
    }

    fn compute(&self, index: usize, op: &Op) -> Result<Tensor, ComputeError> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let same = |a: &Var, b: &Var| -> Result<(), ComputeError> {
            if val(a).shape() != val(b).shape() {
                Err(self.err(index, op, format!("{:?} vs {:?}", val(a).shape(), val(b).shape())))
            } else {
                Ok(())
            }
        };
        let zip = |a: &Var, b: &Var, f: fn(f64, f64) -> f64| -> Result<Tensor, ComputeError> {
            same(a, b)?;
            let (x, y) = (val(a), val(b));
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape(), data)
        };
        Ok(match op {
            Op::Leaf(_) => unreachable!("leaves are not recomputed"),
            Op::Add(a, b) => zip(a, b, |p, q| p + q)?,
            Op::Sub(a, b) => zip(a, b, |p, q| p - q)?,
            Op::Mul(a, b) => zip(a, b, |p, q| p * q)?,
            Op::Div(a, b) => zip(a, b, |p, q| p / q)?,
            Op::Scale(a, c) => {
                let c = *c;
                val(a).map(|v| v * c)
            }
            Op::AddScalar(a, c) => {
                let c = *c;
                val(a).map(|v| v + c)
            }
            Op::Exp(a) => val(a).map(f64::exp),
            Op::Log(a) => val(a).map(f64::ln),
            Op::Sqrt(a) => val(a).map(f64::sqrt),
            Op::Softplus(a) => val(a).map(softplus),
            Op::Square(a) => val(a).map(|v| v * v),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                val(a).map(|v| if v > 0.0 { v } else { s * v })
            }
            Op::MatMul { a, b, ta, tb } => {
                let (x, y) = (val(a), val(b));
                let (Some((m, k)), Some((k2, n))) = (mat_dims(x, *ta), mat_dims(y, *tb)) else {
                    return Err(self.err(index, op, format!("operands {:?} and {:?}", x.shape(), y.shape())));
                };
                if k != k2 {
                    return Err(self.err(index, op, format!("inner dims {k} vs {k2}")));
                }
                let mut out = vec![0.0; m * n];
                let xs = if *ta { (1, m as isize) } else { (k as isize, 1) };
                let ys = if *tb { (1, k as isize) } else { (n as isize, 1) };
                gemm(m, k, n, x.data(), xs, y.data(), ys, &mut out, (n as isize, 1), 0.0);
                Tensor::new(&[m, n], out)?
            }
            Op::Sum(a) => Tensor::scalar(val(a).data().iter().sum()),
            Op::SumLast(a) => {
                let x = val(a);
                let Some((&last, rest)) = x.shape().split_last() else {
                    return Err(self.err(index, op, "scalar input".into()));
                };
                let data = if last == 0 {
                    vec![0.0; rest.iter().product()]
                } else {
                    x.data().chunks(last).map(|c| c.iter().sum()).collect()
                };
                Tensor::new(rest, data)?
            }
            Op::Reshape(a, shape) => val(a)
                .clone()
                .reshape(shape)
                .map_err(|_| self.err(index, op, format!("{:?} -> {:?}", val(a).shape(), shape)))?,
            Op::Broadcast { x, outer, inner, shape } => {
                let v = val(x);
                if v.shape().len() != 1 || shape.iter().product::<usize>() != outer * v.len() * inner {
                    return Err(self.err(index, op, format!("{:?} -> {:?}", v.shape(), shape)));
                }
                let mut data = Vec::with_capacity(outer * v.len() * inner);
                for _ in 0..*outer {
                    for &e in v.data() {
                        data.extend(std::iter::repeat_n(e, *inner));
                    }
                }
                Tensor::new(shape, data)?
            }
            Op::Slice { x, axis, start, end } => {
                let v = val(x);
                if *axis >= v.shape().len() || start > end || *end > v.shape()[*axis] {
                    return Err(self.err(index, op, format!("{:?} axis {axis} [{start}..{end})", v.shape())));
                }
                let (outer, len, inner) = axis_split(v.shape(), *axis);
                let w = end - start;
                let mut data = Vec::with_capacity(outer * w * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    data.extend_from_slice(&v.data()[base + start * inner..base + end * inner]);
                }
                let mut shape = v.shape().to_vec();
                shape[*axis] = w;
                Tensor::new(&shape, data)?
            }
            Op::Concat { xs, axis } => {
                let first = val(&xs[0]);
                if *axis >= first.shape().len() {
                    return Err(self.err(index, op, format!("axis {axis} for {:?}", first.shape())));
                }
                let mut total = 0;
                for x in xs {
                    let s = val(x).shape();
                    let ok = s.len() == first.shape().len()
                        && s.iter().zip(first.shape()).enumerate().all(|(i, (p, q))| i == *axis || p == q);
                    if !ok {
                        return Err(self.err(index, op, format!("{:?} vs {:?}", s, first.shape())));
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = axis_split(first.shape(), *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for x in xs {
                        let v = val(x);
                        let len = v.shape()[*axis];
                        data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = total;
                Tensor::new(&shape, data)?
            }
            Op::Gather { x, idx, shape } => {
                let v = val(x);
                if shape.iter().product::<usize>() != idx.len() {
                    return Err(self.err(index, op, format!("{} indices for shape {:?}", idx.len(), shape)));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= v.len() as i64) {
                    return Err(self.err(index, op, format!("index {bad} out of range {}", v.len())));
                }
                let data = idx.iter().map(|&i| if i < 0 { 0.0 } else { v.data()[i as usize] }).collect();
                Tensor::new(shape, data)?
            }
            Op::Conv { x, w, geom } => {
                let (xv, wv) = (val(x), val(w));
                let (batch, c_in, c_out) = self.conv_dims(index, op, xv, wv, geom.in_len(), geom.taps())?;
                let out = geom.conv(xv.data(), wv.data(), batch, c_in, c_out);
                Tensor::new(&[batch, c_out, geom.out_len()], out)?
            }
            Op::ConvTranspose { y, w, geom } => {
                let (yv, wv) = (val(y), val(w));
                // w: [c_a, c_b, taps] maps [batch, c_a, out_len] -> [batch, c_b, in_len]
                let (batch, c_a, c_b) = self.conv_dims(index, op, yv, wv, geom.out_len(), geom.taps())?;
                let out = geom.conv_adjoint(yv.data(), wv.data(), batch, c_b, c_a);
                Tensor::new(&[batch, c_b, geom.in_len()], out)?
            }
        })
    }

    /// Checks `x: [batch, c, len]` against `w: [c_first, c_second, taps]` with `c == c_first`
    /// for transposed use, `c == c_second` for forward use; returns (batch, c_x, c_other).
    fn conv_dims(
        &self,
        index: usize,
        op: &Op,
        x: &Tensor,
        w: &Tensor,
        len: usize,
        taps: usize,
    ) -> Result<(usize, usize, usize), ComputeError> {
        let (&[batch, c, l], &[w0, w1, t]) = (x.shape(), w.shape()) else {
            return Err(self.err(index, op, format!("input {:?} weight {:?}", x.shape(), w.shape())));
        };
        let transposed = matches!(op, Op::ConvTranspose { .. });
        let (c_x, c_other) = if transposed { (w0, w1) } else { (w1, w0) };
        if l != len || t != taps || c != c_x {
            return Err(self.err(index, op, format!("input {:?} weight {:?}", x.shape(), w.shape())));
        }
        Ok((batch, c_x, c_other))
    }

    fn push(&mut self, op: Op) -> Result<Var, ComputeError> {
        let index = self.nodes.len();
        let value = self.compute(index, &op)?;
        self.nodes.push(Node { op, value });
        Ok(Var(index))
    }

    // Recording API. Binary elementwise operations require equal shapes.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.push(Op::Mul(a, b))
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.push(Op::Div(a, b))
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, ComputeError> {
        self.push(Op::Scale(a, c))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, ComputeError> {
        self.push(Op::AddScalar(a, c))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::Exp(a))
    }
    pub fn log(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::Log(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::Sqrt(a))
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::Softplus(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::Square(a))
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, ComputeError> {
        self.push(Op::LeakyRelu(a, slope))
    }

    /// `op(a) @ op(b)` for 2-D operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, ComputeError> {
        self.push(Op::MatMul { a, b, ta, tb })
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::Sum(a))
    }
    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, ComputeError> {
        self.push(Op::SumLast(a))
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ComputeError> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Repeats a vector `[k]` into `[outer, k, inner]`, reported with `shape`.
    pub fn broadcast(&mut self, x: Var, outer: usize, inner: usize, shape: &[usize]) -> Result<Var, ComputeError> {
        self.push(Op::Broadcast { x, outer, inner, shape: shape.to_vec() })
    }

    /// Tiles a vector `[k]` into rows `[n, k]`.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var, ComputeError> {
        let k = self.value(x).len();
        self.broadcast(x, n, 1, &[n, k])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, ComputeError> {
        self.push(Op::Slice { x, axis, start, end })
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, ComputeError> {
        if xs.is_empty() {
            return Err(ComputeError::Shape { node: "concat".into(), detail: "no inputs".into() });
        }
        self.push(Op::Concat { xs: xs.to_vec(), axis })
    }
    /// `out[i] = x.flat[idx[i]]`, or zero where `idx[i] < 0`.
    pub fn gather(&mut self, x: Var, idx: Arc<Vec<i64>>, shape: &[usize]) -> Result<Var, ComputeError> {
        self.push(Op::Gather { x, idx, shape: shape.to_vec() })
    }
    /// `x: [batch, c_in, in]`, `w: [c_out, c_in, taps]` -> `[batch, c_out, out]`.
    pub fn conv(&mut self, x: Var, w: Var, geom: Arc<ConvGeometry>) -> Result<Var, ComputeError> {
        self.push(Op::Conv { x, w, geom })
    }
    /// Adjoint of [`conv`](Self::conv): `y: [batch, c_a, out]`, `w: [c_a, c_b, taps]` -> `[batch, c_b, in]`.
    pub fn conv_transpose(&mut self, y: Var, w: Var, geom: Arc<ConvGeometry>) -> Result<Var, ComputeError> {
        self.push(Op::ConvTranspose { y, w, geom })
    }

    /// Re-evaluates every recorded operation after rebinding named leaves.
    ///
    /// Every `Input` leaf must appear in `bindings`; `Param` leaves keep their
    /// value unless rebound. Returns the values of `outputs`.
    pub fn forward(
        &mut self,
        bindings: &HashMap<String, Tensor>,
        outputs: &[Var],
    ) -> Result<Vec<Tensor>, ComputeError> {
        for i in 0..self.nodes.len() {
            if let Op::Leaf(kind) = &self.nodes[i].op {
                match kind {
                    LeafKind::Constant => {}
                    LeafKind::Input(name) => {
                        let t = bindings.get(name).ok_or_else(|| ComputeError::Unbound(name.clone()))?;
                        self.nodes[i].value = t.clone();
                    }
                    LeafKind::Param(name) => {
                        if let Some(t) = bindings.get(name) {
                            self.nodes[i].value = t.clone();
                        }
                    }
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.nodes[i].value = self.compute(i, &op)?;
        }
        Ok(outputs.iter().map(|&v| self.value(v).clone()).collect())
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, ComputeError> {
        if self.value(loss).len() != 1 {
            return Err(ComputeError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradients for every `Param` leaf reachable from `loss`, keyed by name.
    /// Parameters bound more than once have their gradients summed.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Tensor>, ComputeError> {
        let grads = self.backward(loss)?;
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf(LeafKind::Param(name)) = &node.op {
                let g = grads.get(Var(i)).cloned().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                acc(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * bv[j];
                    }
                });
                acc(*b, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * av[j];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] / bv[j];
                    }
                });
                acc(*b, &|d| {
                    for j in 0..d.len() {
                        d[j] -= gd[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a, _) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y)),
            Op::Exp(a) => {
                let out = self.nodes[i].value.data();
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * out[j];
                    }
                })
            }
            Op::Log(a) => {
                let av = val(*a).data();
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] / av[j];
                    }
                })
            }
            Op::Sqrt(a) => {
                let out = self.nodes[i].value.data();
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * 0.5 / out[j];
                    }
                })
            }
            Op::Softplus(a) => {
                let av = val(*a).data();
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * sigmoid(av[j]);
                    }
                })
            }
            Op::Square(a) => {
                let av = val(*a).data();
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += 2.0 * gd[j] * av[j];
                    }
                })
            }
            Op::LeakyRelu(a, s) => {
                let av = val(*a).data();
                acc(*a, &|d| {
                    for j in 0..d.len() {
                        d[j] += if av[j] > 0.0 { gd[j] } else { s * gd[j] };
                    }
                })
            }
            Op::MatMul { a, b, ta, tb } => {
                let (x, y) = (val(*a), val(*b));
                let (m, k) = mat_dims(x, *ta).unwrap();
                let n = mat_dims(y, *tb).unwrap().1;
                // View strides of op(x) (m x k) and op(y) (k x n).
                let xs: (isize, isize) = if *ta { (1, m as isize) } else { (k as isize, 1) };
                let ys: (isize, isize) = if *tb { (1, k as isize) } else { (n as isize, 1) };
                // d op(x) = g (m x n) * op(y)^T (n x k), written through x's layout.
                acc(*a, &|d| gemm(m, n, k, gd, (n as isize, 1), y.data(), (ys.1, ys.0), d, xs, 1.0));
                // d op(y) = op(x)^T (k x m) * g (m x n), written through y's layout.
                acc(*b, &|d| gemm(k, m, n, x.data(), (xs.1, xs.0), gd, (n as isize, 1), d, ys, 1.0));
            }
            Op::Sum(a) => {
                let s = gd[0];
                acc(*a, &|d| d.iter_mut().for_each(|x| *x += s))
            }
            Op::SumLast(a) => {
                let last = *val(*a).shape().last().unwrap();
                acc(*a, &|d| {
                    if last > 0 {
                        for (row, &gv) in d.chunks_mut(last).zip(gd) {
                            row.iter_mut().for_each(|x| *x += gv);
                        }
                    }
                })
            }
            Op::Reshape(a, _) => acc(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, y)| *x += y)),
            Op::Broadcast { x, outer, inner, .. } => {
                let k = val(*x).len();
                let (outer, inner) = (*outer, *inner);
                acc(*x, &|d| {
                    for o in 0..outer {
                        for e in 0..k {
                            let base = (o * k + e) * inner;
                            d[e] += gd[base..base + inner].iter().sum::<f64>();
                        }
                    }
                })
            }
            Op::Slice { x, axis, start, end } => {
                let (outer, len, inner) = axis_split(val(*x).shape(), *axis);
                let w = end - start;
                acc(*x, &|d| {
                    for o in 0..outer {
                        let dst = &mut d[o * len * inner + start * inner..o * len * inner + end * inner];
                        let src = &gd[o * w * inner..(o + 1) * w * inner];
                        dst.iter_mut().zip(src).for_each(|(p, q)| *p += q);
                    }
                })
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for x in xs {
                    let len = val(*x).shape()[*axis];
                    acc(*x, &|d| {
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut d[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(p, q)| *p += q);
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather { x, idx, .. } => acc(*x, &|d| {
                for (&j, &gv) in idx.iter().zip(gd) {
                    if j >= 0 {
                        d[j as usize] += gv;
                    }
                }
            }),
            Op::Conv { x, w, geom } => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, c_in, c_out) = (xv.shape()[0], wv.shape()[1], wv.shape()[0]);
                acc(*x, &|d| {
                    let dx = geom.conv_adjoint(gd, wv.data(), batch, c_in, c_out);
                    d.iter_mut().zip(&dx).for_each(|(p, q)| *p += q);
                });
                acc(*w, &|d| geom.conv_weight_grad(xv.data(), gd, batch, c_in, c_out, d));
            }
            Op::ConvTranspose { y, w, geom } => {
                let (yv, wv) = (val(*y), val(*w));
                let (batch, c_a, c_b) = (yv.shape()[0], wv.shape()[0], wv.shape()[1]);
                acc(*y, &|d| {
                    let dy = geom.conv(gd, wv.data(), batch, c_b, c_a);
                    d.iter_mut().zip(&dy).for_each(|(p, q)| *p += q);
                });
                acc(*w, &|d| geom.conv_weight_grad(gd, yv.data(), batch, c_b, c_a, d));
            }
        }
    }
}
