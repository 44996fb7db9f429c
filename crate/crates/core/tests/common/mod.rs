#![allow(dead_code)]

use std::collections::BTreeMap;

use mssde_core::compute::{Bound, Graph, ParamStore, Rng, Tensor, Var};

pub fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = 2.0 * rng.uniform() - 1.0);
    t
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Reverse-mode gradient of a scalar built from `params` (as parameter leaves) and
/// `inputs` (as further parameters named `input{i}`) versus central differences
/// with step 1e-5. Returns the norm-wise relative error per tensor name.
pub fn grad_check(
    params: &ParamStore,
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph, &Bound, &[Var]) -> Var,
) -> BTreeMap<String, f64> {
    let mut all = params.clone();
    for (i, t) in inputs.iter().enumerate() {
        all.insert(format!("input{i}"), t.clone());
    }
    let build = |store: &ParamStore| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xs: Vec<Var> = (0..inputs.len()).map(|i| p[&format!("input{i}")]).collect();
        let out = f(&mut g, &p, &xs);
        (g, p, out)
    };
    let (g, p, out) = build(&all);
    let grads = g.backward(out).unwrap();
    let h = 1e-5;
    let mut report = BTreeMap::new();
    for (name, t) in all.iter() {
        let analytic = grads.get(p[name]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut num = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = all.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = all.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let (gp, _, op) = build(&plus);
            let (gm, _, om) = build(&minus);
            num[j] = (gp.value(op).item() - gm.value(om).item()) / (2.0 * h);
        }
        report.insert(name.clone(), rel_err(analytic.data(), &num));
    }
    report
}

/// Random weighted sum of `v`, making every entry matter.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let w = uniform(&mut Rng::new(seed), g.shape(v));
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}
