use std::collections::HashMap;
use std::sync::Arc;

use mssde_core::compute::{ComputeError, ConvGeometry, Graph, Padding, Rng, Tensor, Var, LEAKY_SLOPE};
use proptest::prelude::*;

fn uniform(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 2.0 * rng.uniform() - 1.0).collect()).unwrap()
}

/// Builds `f` on fresh leaves and compares reverse-mode gradients with central
/// differences (step 1e-5) for every input. Returns the worst relative error.
fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().enumerate().map(|(i, t)| g.param(&format!("p{i}"), t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(&format!("p{i}"), t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut num = vec![0.0; t.len()];
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            num[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Random weighted sum so every output entry contributes a distinct weight.
fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let w = uniform(&mut Rng::new(seed), g.shape(v));
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let a = uniform(&mut Rng::new(1), &[3, 4]);
    let i = g.constant(Tensor::eye(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn leaky_relu_definition() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 2.0]));
    let y = g.leaky_relu(x, LEAKY_SLOPE).unwrap();
    assert_eq!(g.value(y).data(), &[-0.01, 2.0]);
}

#[test]
fn conv_with_delta_kernel_is_identity() {
    let x = uniform(&mut Rng::new(2), &[2, 1, 17]);
    let mut k = vec![0.0; 5];
    k[2] = 1.0;
    let geom = Arc::new(ConvGeometry::new(&[17], &[5], 1, 2, Padding::Circular).unwrap());
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let kv = g.constant(Tensor::new(&[1, 1, 5], k).unwrap());
    let y = g.conv(xv, kv, geom).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn linear_form_gradient() {
    let x = uniform(&mut Rng::new(3), &[6]);
    let mut g = Graph::new();
    let w = g.param("w", uniform(&mut Rng::new(4), &[6]));
    let xv = g.constant(x.clone());
    let p = g.mul(w, xv).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap(), &x);
}

#[test]
fn quadratic_matmul_gradient_vs_fd() {
    let mut rng = Rng::new(5);
    let w = uniform(&mut rng, &[4, 3]);
    let x = uniform(&mut rng, &[3, 1]);
    let err = grad_check(&[w, x], &|g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        let s = g.square(y).unwrap();
        g.sum(s).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn conv_leaky_sum_chain_vs_fd() {
    let mut rng = Rng::new(6);
    let x = uniform(&mut rng, &[2, 2, 12]);
    let w = uniform(&mut rng, &[3, 2, 5]);
    let geom = Arc::new(ConvGeometry::new(&[12], &[5], 2, 2, Padding::Zero).unwrap());
    let err = grad_check(&[x, w], &|g, v| {
        let y = g.conv(v[0], v[1], geom.clone()).unwrap();
        let a = g.leaky_relu(y, LEAKY_SLOPE).unwrap();
        g.sum(a).unwrap()
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn every_primitive_matches_fd() {
    let mut rng = Rng::new(11);
    let a = uniform(&mut rng, &[3, 4]);
    let b = uniform(&mut rng, &[3, 4]);
    let pos = a.map(|v| v.abs() + 0.5);
    type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;
    let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
        ("add", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.add(v[0], v[1]).unwrap(); project(g, y, 1) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.sub(v[0], v[1]).unwrap(); project(g, y, 1) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|g, v| { let y = g.mul(v[0], v[1]).unwrap(); project(g, y, 1) })),
        ("div", vec![a.clone(), pos.clone()], Box::new(|g, v| { let y = g.div(v[0], v[1]).unwrap(); project(g, y, 1) })),
        ("scale", vec![a.clone()], Box::new(|g, v| { let y = g.scale(v[0], -2.5).unwrap(); project(g, y, 1) })),
        ("add-scalar", vec![a.clone()], Box::new(|g, v| { let y = g.add_scalar(v[0], 0.3).unwrap(); let y = g.square(y).unwrap(); project(g, y, 1) })),
        ("exp", vec![a.clone()], Box::new(|g, v| { let y = g.exp(v[0]).unwrap(); project(g, y, 1) })),
        ("log", vec![pos.clone()], Box::new(|g, v| { let y = g.log(v[0]).unwrap(); project(g, y, 1) })),
        ("sqrt", vec![pos.clone()], Box::new(|g, v| { let y = g.sqrt(v[0]).unwrap(); project(g, y, 1) })),
        ("softplus", vec![a.clone()], Box::new(|g, v| { let y = g.softplus(v[0]).unwrap(); project(g, y, 1) })),
        ("square", vec![a.clone()], Box::new(|g, v| { let y = g.square(v[0]).unwrap(); project(g, y, 1) })),
        ("leaky-relu", vec![a.clone()], Box::new(|g, v| { let y = g.leaky_relu(v[0], LEAKY_SLOPE).unwrap(); project(g, y, 1) })),
        ("matmul", vec![a.clone(), uniform(&mut Rng::new(2), &[4, 2])], Box::new(|g, v| { let y = g.matmul(v[0], v[1]).unwrap(); project(g, y, 1) })),
        ("matmul-tt", vec![uniform(&mut Rng::new(3), &[4, 3]), uniform(&mut Rng::new(4), &[2, 4])], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], true, true).unwrap(); project(g, y, 1) })),
        ("matmul-nt", vec![a.clone(), uniform(&mut Rng::new(5), &[5, 4])], Box::new(|g, v| { let y = g.matmul_t(v[0], v[1], false, true).unwrap(); project(g, y, 1) })),
        ("sum-last", vec![a.clone()], Box::new(|g, v| { let y = g.sum_last(v[0]).unwrap(); project(g, y, 1) })),
        ("reshape", vec![a.clone()], Box::new(|g, v| { let y = g.reshape(v[0], &[2, 6]).unwrap(); project(g, y, 1) })),
        ("broadcast", vec![uniform(&mut Rng::new(6), &[3])], Box::new(|g, v| { let y = g.broadcast(v[0], 2, 4, &[2, 3, 4]).unwrap(); project(g, y, 1) })),
        ("slice", vec![a.clone()], Box::new(|g, v| { let y = g.slice(v[0], 1, 1, 3).unwrap(); project(g, y, 1) })),
        ("concat", vec![a.clone(), uniform(&mut Rng::new(7), &[3, 2])], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1).unwrap(); project(g, y, 1) })),
        ("gather", vec![a.clone()], Box::new(|g, v| { let y = g.gather(v[0], Arc::new(vec![0, 5, -1, 5, 11, 2]), &[2, 3]).unwrap(); project(g, y, 1) })),
    ];
    for (name, inputs, f) in cases {
        let err = grad_check(&inputs, f.as_ref());
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn conv_variants_match_fd() {
    let mut rng = Rng::new(12);
    for (dims, kernel, stride, pad, mode) in [
        (vec![16], vec![5], 1, 2, Padding::Circular),
        (vec![16], vec![9], 4, 4, Padding::Circular),
        (vec![15], vec![3], 2, 1, Padding::Zero),
        (vec![8, 8], vec![3, 3], 2, 1, Padding::Zero),
        (vec![8, 8], vec![5, 5], 1, 2, Padding::Circular),
    ] {
        let geom = Arc::new(ConvGeometry::new(&dims, &kernel, stride, pad, mode).unwrap());
        let taps: usize = kernel.iter().product();
        let x = uniform(&mut rng, &[2, 2, geom.in_len()]);
        let w = uniform(&mut rng, &[3, 2, taps]);
        let gc = geom.clone();
        let err = grad_check(&[x, w.clone()], &move |g, v| {
            let y = g.conv(v[0], v[1], gc.clone()).unwrap();
            project(g, y, 9)
        });
        assert!(err < 1e-4, "conv {dims:?}: {err}");
        let y = uniform(&mut rng, &[2, 3, geom.out_len()]);
        let gc = geom.clone();
        let err = grad_check(&[y, w], &move |g, v| {
            let x = g.conv_transpose(v[0], v[1], gc.clone()).unwrap();
            project(g, x, 9)
        });
        assert!(err < 1e-4, "conv-transpose {dims:?}: {err}");
    }
}

fn adjoint_gap(dims: &[usize], kernel: &[usize], stride: usize, pad: usize, mode: Padding, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let geom = Arc::new(ConvGeometry::new(dims, kernel, stride, pad, mode).unwrap());
    let taps: usize = kernel.iter().product();
    let x = uniform(&mut rng, &[1, 2, geom.in_len()]);
    let y = uniform(&mut rng, &[1, 3, geom.out_len()]);
    let w = uniform(&mut rng, &[3, 2, taps]);
    let mut g = Graph::new();
    let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
    let kx = g.conv(xv, wv, geom.clone()).unwrap();
    let kty = g.conv_transpose(yv, wv, geom).unwrap();
    (g.value(kx).dot(&y) - x.dot(g.value(kty))).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_transpose_is_adjoint(
        len in 6usize..40, k in 1usize..4, stride in 1usize..4, circular in any::<bool>(), seed in 0u64..1000
    ) {
        let kernel = 2 * k + 1;
        let mode = if circular { Padding::Circular } else { Padding::Zero };
        prop_assume!(len + 2 * k >= kernel);
        prop_assert!(adjoint_gap(&[len], &[kernel], stride, k, mode, seed) < 1e-10);
        prop_assert!(adjoint_gap(&[len, len / 2 + 3], &[kernel, kernel], stride, k, mode, seed) < 1e-10);
    }
}

#[test]
fn forward_is_deterministic_and_replayable() {
    let mut rng = Rng::new(13);
    let x0 = uniform(&mut rng, &[5, 3]);
    let w0 = uniform(&mut rng, &[3, 2]);
    let build = |x: &Tensor, w: &Tensor| {
        let mut g = Graph::new();
        let xv = g.input("x", x.clone());
        let wv = g.param("w", w.clone());
        let y = g.matmul(xv, wv).unwrap();
        let y = g.leaky_relu(y, LEAKY_SLOPE).unwrap();
        let s = g.sum(y).unwrap();
        (g, s)
    };
    let (mut g, s) = build(&x0, &w0);
    let first = g.value(s).item();
    let (g2, s2) = build(&x0, &w0);
    assert_eq!(first.to_bits(), g2.value(s2).item().to_bits());

    let x1 = uniform(&mut rng, &[5, 3]);
    let out = g.forward(&HashMap::from([("x".to_string(), x1.clone())]), &[s]).unwrap();
    let (g3, s3) = build(&x1, &w0);
    assert_eq!(out[0].item().to_bits(), g3.value(s3).item().to_bits());
}

#[test]
fn forward_reports_shape_errors_and_unbound_inputs() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::zeros(&[2, 3]));
    let w = g.param("w", Tensor::zeros(&[3, 1]));
    let y = g.matmul(x, w).unwrap();
    let err = g.forward(&HashMap::from([("x".to_string(), Tensor::zeros(&[2, 4]))]), &[y]).unwrap_err();
    match err {
        ComputeError::Shape { node, .. } => assert!(node.contains("matmul"), "{node}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(g.forward(&HashMap::new(), &[y]), Err(ComputeError::Unbound(_))));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::zeros(&[3]));
    assert!(matches!(g.backward(x), Err(ComputeError::NonScalarLoss(_))));
}

#[test]
fn shared_parameter_gradients_accumulate() {
    let mut g = Graph::new();
    let a = g.param("w", Tensor::vector(vec![2.0]));
    let b = g.param("w", Tensor::vector(vec![2.0]));
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.param_grads(s).unwrap();
    assert_eq!(grads["w"].data(), &[4.0]);
}
