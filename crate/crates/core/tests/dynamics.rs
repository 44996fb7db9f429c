mod common;

use common::*;
use mssde_core::compute::{init_params, ParamStore, Rng, Tensor};
use mssde_core::datagen::GridSpec;
use mssde_core::dynamics::*;
use mssde_core::scales::{ScaleConfig, ScaleOps};
use nalgebra::DMatrix;

fn model_1d(n_coarse: usize, n_eta: usize, periodic: bool, seed: u64) -> (SdeModel, ParamStore) {
    let cfg = ScaleConfig {
        grid: GridSpec::new(&[n_coarse * 2], &[0.0], &[1.0], periodic, 1).unwrap(),
        coarse: vec![n_coarse],
        kernel_factor: 4,
        micro_filters: vec![2],
        micro_kernel: 3,
        init_sigma_z: 1e-2,
    };
    let dyn_cfg = DynamicsConfig { macro_hidden: vec![8], micro_hidden: vec![8], ..Default::default() };
    let model = SdeModel::new(ScaleOps::new(cfg, n_eta).unwrap(), dyn_cfg).unwrap();
    let mut rng = Rng::new(seed);
    let mut params = init_params(&model.all_param_specs(), n_eta, &mut rng);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b0") || name.ends_with(".b1") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        }
    }
    (model, params)
}

fn model_2d(n_eta: usize) -> (SdeModel, ParamStore) {
    let cfg = ScaleConfig {
        grid: GridSpec::new(&[8, 8], &[0.0; 2], &[1.0; 2], true, 2).unwrap(),
        coarse: vec![4, 4],
        kernel_factor: 4,
        micro_filters: vec![2],
        micro_kernel: 3,
        init_sigma_z: 1e-2,
    };
    let dyn_cfg = DynamicsConfig { macro_hidden: vec![6], micro_hidden: vec![6], ..Default::default() };
    let model = SdeModel::new(ScaleOps::new(cfg, n_eta).unwrap(), dyn_cfg).unwrap();
    let params = init_params(&model.all_param_specs(), n_eta, &mut Rng::new(3));
    (model, params)
}

fn zeroed(params: &ParamStore, prefix: &str) -> ParamStore {
    let mut p = params.clone();
    for (name, t) in p.iter_mut() {
        if name.starts_with(prefix) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    p
}

/// One hidden layer MLP evaluated by hand.
fn mlp_by_hand(params: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in 0..2 {
        let w = params.get(&format!("{prefix}.w{layer}")).unwrap();
        let b = params.get(&format!("{prefix}.b{layer}")).unwrap();
        let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
        assert_eq!(n_in, h.len());
        let mut o: Vec<f64> = b.data().to_vec();
        for j in 0..n_out {
            for i in 0..n_in {
                o[j] += h[i] * w.data()[i * n_out + j];
            }
        }
        if layer == 0 {
            o.iter_mut().for_each(|v| *v = if *v > 0.0 { *v } else { 0.01 * *v });
        }
        h = o;
    }
    h
}

#[test]
fn stencil_drift_matches_hand_evaluation() {
    for periodic in [true, false] {
        let (model, params) = model_1d(7, 2, periodic, 1);
        let z = uniform(&mut Rng::new(2), &[9]);
        let f = model.macro_drift(&params, &z).unwrap();
        for j in 0..7i64 {
            let mut x: Vec<f64> = (-2..=2)
                .map(|o| {
                    let i = if periodic { (j + o).rem_euclid(7) } else { (j + o).clamp(0, 6) };
                    z.data()[i as usize]
                })
                .collect();
            x.extend(&z.data()[7..]);
            let expect = mlp_by_hand(&params, "macro_drift", &x)[0];
            assert!((f.data()[j as usize] - expect).abs() < 1e-13, "periodic={periodic} j={j}");
        }
    }
}

#[test]
fn zero_weights_give_zero_drift() {
    let (model, params) = model_1d(6, 2, true, 0);
    let p = zeroed(&zeroed(&params, "macro_drift"), "micro_drift");
    let z = uniform(&mut Rng::new(1), &[3, 8]);
    assert!(model.drift(&p, &z, 0.4).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(model.config.stencil_q, 2);
}

#[test]
fn periodic_translation_equivariance() {
    let (model, params) = model_1d(10, 2, true, 5);
    let mut rng = Rng::new(6);
    for _ in 0..10 {
        let z = uniform(&mut rng, &[12]);
        let mut shifted = z.clone();
        for j in 0..10 {
            shifted.data_mut()[(j + 3) % 10] = z.data()[j];
        }
        let a = model.macro_drift(&params, &z).unwrap();
        let b = model.macro_drift(&params, &shifted).unwrap();
        for j in 0..10 {
            assert!((b.data()[(j + 3) % 10] - a.data()[j]).abs() < 1e-12);
        }
    }

    let (m2, p2) = model_2d(1);
    let z = uniform(&mut rng, &[33]);
    let mut shifted = z.clone();
    for f in 0..2 {
        for a in 0..4 {
            for b in 0..4 {
                shifted.data_mut()[f * 16 + ((a + 1) % 4) * 4 + (b + 2) % 4] = z.data()[f * 16 + a * 4 + b];
            }
        }
    }
    let fa = m2.macro_drift(&p2, &z).unwrap();
    let fb = m2.macro_drift(&p2, &shifted).unwrap();
    for f in 0..2 {
        for a in 0..4 {
            for b in 0..4 {
                let (i, j) = (f * 16 + a * 4 + b, f * 16 + ((a + 1) % 4) * 4 + (b + 2) % 4);
                assert!((fb.data()[j] - fa.data()[i]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn micro_drift_contract() {
    let (m0, p0) = model_1d(6, 0, true, 0);
    let z0 = uniform(&mut Rng::new(1), &[6]);
    assert_eq!(m0.micro_drift(&p0, &z0, 0.3).unwrap().len(), 0);
    assert_eq!(m0.drift(&p0, &z0, 0.3).unwrap(), m0.macro_drift(&p0, &z0).unwrap());

    let (model, params) = model_1d(6, 2, true, 4);
    let z = uniform(&mut Rng::new(2), &[8]);
    let zero = zeroed(&params, "micro_drift");
    assert!(model.micro_drift(&zero, &z, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
    let a = model.micro_drift(&params, &z, 0.1).unwrap();
    let b = model.micro_drift(&params, &z, 0.6).unwrap();
    assert_eq!(a.len(), 2);
    assert!(max_abs_diff(a.data(), b.data()) > 1e-6);

    let full = model.drift(&params, &z, 0.1).unwrap();
    let mac = model.macro_drift(&params, &z).unwrap();
    assert_eq!(&full.data()[..6], mac.data());
    assert_eq!(&full.data()[6..], a.data());

    let (m2, p2) = model_2d(2);
    assert!(p2.contains("micro_drift.psi"));
    assert_eq!(m2.drift(&p2, &uniform(&mut Rng::new(3), &[34]), 0.2).unwrap().len(), 34);
}

#[test]
fn drift_gradients() {
    for (model, params) in [model_1d(5, 2, false, 7), model_2d(1)] {
        let z = uniform(&mut Rng::new(8), &[2, model.n_z()]);
        let t = Tensor::new(&[2, 1], vec![0.2, 0.7]).unwrap();
        let report = grad_check(&params, &[z, t], &|g, p, x| {
            let f = model.drift_g(g, p, x[0], x[1]).unwrap();
            let l = model.dispersion_g(g, p).unwrap();
            let a = project(g, f, 1);
            let b = project(g, l, 2);
            g.add(a, b).unwrap()
        });
        for (name, err) in &report {
            if name.starts_with("macro_drift") || name.starts_with("micro_drift") || name.starts_with("sde") || name.starts_with("input") {
                assert!(*err < 1e-4, "{name}: {err}");
            }
        }
    }
}

#[test]
fn zero_drift_zero_noise_is_constant() {
    let z0 = Tensor::vector(vec![0.5, -1.0, 2.0]);
    let out = simulate(|z, _| Ok(Tensor::zeros(z.shape())), &[0.0; 3], &z0, 0.0, 0.1, 20, 5, &[0, 7, 20], &Rng::new(0)).unwrap();
    assert_eq!(out.shape(), &[5, 3, 3]);
    for chunk in out.data().chunks(3) {
        assert_eq!(chunk, z0.data());
    }
}

#[test]
fn ornstein_uhlenbeck_moments() {
    let n = 20_000;
    let steps = 5000;
    let out = simulate(
        |z, _| Ok(z.map(|v| -v)),
        &[2f64.sqrt()],
        &Tensor::vector(vec![0.0]),
        0.0,
        1e-3,
        steps,
        n,
        &[steps],
        &Rng::new(11),
    )
    .unwrap();
    let x = out.data();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    assert!((var - 1.0).abs() < 0.05, "var {var}");
}

#[test]
fn linear_drift_matches_matrix_exponential() {
    let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, -0.2, 0.8, 0.1, 0.0, 0.4, 1.5]);
    let z0 = [1.0, -0.5, 0.25];
    let exact = (-&a * 1.0).exp() * nalgebra::DVector::from_row_slice(&z0);
    let drift = |z: &Tensor, _t: f64| {
        let mut out = Tensor::zeros(z.shape());
        for r in 0..z.shape()[0] {
            for i in 0..3 {
                out.data_mut()[r * 3 + i] = -(0..3).map(|j| a[(i, j)] * z.data()[r * 3 + j]).sum::<f64>();
            }
        }
        Ok(out)
    };
    let mut errs = Vec::new();
    for steps in [100, 200, 400, 800] {
        let out = simulate(drift, &[0.0; 3], &Tensor::vector(z0.to_vec()), 0.0, 1.0 / steps as f64, steps, 1, &[steps], &Rng::new(0)).unwrap();
        let e = (0..3).map(|i| (out.data()[i] - exact[i]).powi(2)).sum::<f64>().sqrt();
        errs.push(e);
    }
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() < 0.15, "ratio {ratio}");
    }
    assert!(errs[3] < 1e-3);
}

#[test]
fn blow_up_reports_path_and_step() {
    let z0 = Tensor::new(&[3, 1], vec![1.0, 1.0, 1e300]).unwrap();
    let err = simulate(|z, _| Ok(z.map(|v| v * 1e10)), &[0.0], &z0, 0.0, 1.0, 5, 3, &[5], &Rng::new(0)).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("path 2") && msg.contains("step 1"), "{msg}");
}

#[test]
fn learned_sde_paths_are_reproducible() {
    let (model, params) = model_1d(6, 2, true, 9);
    let z0 = uniform(&mut Rng::new(1), &[8]);
    let a = euler_maruyama(&model, &params, &z0, 0.0, 0.5, 10, &Rng::new(4), 70).unwrap();
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| euler_maruyama(&model, &params, &z0, 0.0, 0.5, 10, &Rng::new(4), 70).unwrap());
    assert_eq!(a.shape(), &[70, 11, 8]);
    assert_eq!(a, b);
    assert_eq!(&a.data()[..8], z0.data());
    assert_ne!(a.data()[8..16], a.data()[..8]);
    assert_ne!(a.data()[8 * 12..8 * 13], a.data()[8..16]);
}
