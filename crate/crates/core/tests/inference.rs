mod common;

use common::*;
use mssde_core::compute::{init_params, ParamStore, Rng, Tensor};
use mssde_core::datagen::{Dataset, GridSpec, Split, Trajectory};
use mssde_core::dynamics::{DynamicsConfig, SdeModel};
use mssde_core::inference::*;
use mssde_core::scales::ScaleConfig;
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn segmentation_examples() {
    let times: Vec<f64> = (0..5).map(|i| i as f64).collect();
    let segs = segment(&times, 2).unwrap();
    let obs: Vec<Vec<usize>> = segs.iter().map(|s| s.obs.clone()).collect();
    assert_eq!(obs, vec![vec![0, 1], vec![1, 2, 3], vec![3, 4]]);
    let owned: Vec<Vec<usize>> = segs.iter().map(|s| s.owned_obs().collect()).collect();
    assert_eq!(owned, vec![vec![0, 1], vec![2, 3], vec![4]]);

    assert_eq!(segment(&times, 5).unwrap().len(), 1);
    let long: Vec<f64> = (0..1001).map(|i| i as f64 * 1e-3).collect();
    for m in [2, 3, 7, 10, 1000, 1001] {
        assert_eq!(segment(&long, m).unwrap().len(), 1001usize.div_ceil(m));
    }
    assert!(segment(&times, 1).is_err());
    assert!(segment(&times[..1], 2).is_err());
}

proptest! {
    #[test]
    fn segments_cover_once_and_share_boundaries(n_t in 2usize..300, m in 2usize..40) {
        let times: Vec<f64> = (0..n_t).map(|i| i as f64 * 0.1).collect();
        let segs = segment(&times, m).unwrap();
        let mut count = vec![0; n_t];
        for s in &segs {
            prop_assert!(s.obs.len() >= 2 || n_t == 1);
            for i in s.owned_obs() {
                count[i] += 1;
            }
        }
        prop_assert!(count.iter().all(|&c| c == 1));
        for w in segs.windows(2) {
            prop_assert_eq!(w[0].end(), w[1].start());
            prop_assert_eq!(w[0].obs.last(), w[1].obs.first());
        }
    }
}

#[test]
fn gauss_legendre_exactness() {
    let (x, w) = gauss_legendre(5);
    let expect = [0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
    assert!((x[2] - expect[0]).abs() < 1e-15 && (x[3] - expect[1]).abs() < 1e-15 && (x[4] - expect[2]).abs() < 1e-15);
    assert!((w[2] - 128.0 / 225.0).abs() < 1e-15);
    for n in [1usize, 2, 7, 64] {
        let (x, w) = gauss_legendre(n);
        for k in 0..2 * n {
            let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
            let exact = if k % 2 == 1 { 0.0 } else { 2.0 / (k + 1) as f64 };
            assert!((quad - exact).abs() < 1e-13, "n={n} k={k}: {quad} vs {exact}");
        }
    }
    let (x, w) = gauss_legendre_on(64, 0.3, 1.1);
    let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x.exp()).sum();
    assert!((quad - (1.1f64.exp() - 0.3f64.exp())).abs() < 1e-13);
}

#[test]
fn hermite_interpolation_properties() {
    let knots = [0.0, 0.1, 0.25, 0.3, 0.5, 0.55];
    let quad = |t: f64| 2.0 - 3.0 * t + 5.0 * t * t;
    let dquad = |t: f64| -3.0 + 10.0 * t;
    let vals: Vec<f64> = knots.iter().map(|&t| quad(t)).collect();
    let ts: Vec<f64> = (0..=110).map(|i| i as f64 * 0.005).collect();
    let (w, dw) = hermite_weights(&knots, &ts);
    let m = knots.len();
    for (r, &t) in ts.iter().enumerate() {
        let v: f64 = (0..m).map(|j| w[r * m + j] * vals[j]).sum();
        let d: f64 = (0..m).map(|j| dw[r * m + j] * vals[j]).sum();
        assert!((v - quad(t)).abs() < 1e-12, "t={t}");
        assert!((d - dquad(t)).abs() < 1e-10, "t={t}");
        assert!((w[r * m..(r + 1) * m].iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!(dw[r * m..(r + 1) * m].iter().sum::<f64>().abs() < 1e-10);
    }
    // Passes through the knots exactly.
    let (w, _) = hermite_weights(&knots, &knots);
    for r in 0..m {
        for j in 0..m {
            assert_eq!(w[r * m + j], if r == j { 1.0 } else { 0.0 });
        }
    }
    // Two knots: straight line.
    let (w, dw) = hermite_weights(&[1.0, 3.0], &[1.5, 2.0]);
    assert!((w[0] - 0.75).abs() < 1e-15 && (w[3] - 0.5).abs() < 1e-15);
    assert!((dw[0] + 0.5).abs() < 1e-15 && (dw[1] - 0.5).abs() < 1e-15);
}

#[test]
fn variational_path_through_anchors() {
    let times = vec![0.0, 0.1, 0.2, 0.3];
    let mut rng = Rng::new(1);
    let means = uniform(&mut rng, &[4, 3]);
    let log_vars = uniform(&mut rng, &[4, 3]);
    let path = VariationalPath::new(times.clone(), means.clone(), log_vars.clone()).unwrap();
    for (k, &t) in times.iter().enumerate() {
        let pt = path.at(t);
        assert_eq!(pt.mu, means.row(k));
        for i in 0..3 {
            assert!((pt.sigma[i] - log_vars.row(k)[i].exp()).abs() < 1e-15);
        }
    }
    for i in 0..=60 {
        let pt = path.at(i as f64 * 0.005);
        assert!(pt.sigma.iter().all(|&s| s > 0.0));
        // sigma_dot is the derivative of exp(log-variance interpolant); the
        // interpolant is only C1 at knots, so keep the step small.
        let h = 1e-8;
        let (a, b) = (path.at(pt.t + h), path.at(pt.t - h));
        for j in 0..3 {
            assert!(((a.sigma[j] - b.sigma[j]) / (2.0 * h) - pt.sigma_dot[j]).abs() < 1e-5, "t={} fd={} an={}", pt.t, (a.sigma[j] - b.sigma[j]) / (2.0 * h), pt.sigma_dot[j]);
        }
    }
}

#[test]
fn b_matrix_cases() {
    assert_eq!(b_diag(&[1.0], &[0.0], &[2f64.sqrt()]).unwrap()[0], 1.0000000000000002f64.min(1.0).max(b_diag(&[1.0], &[0.0], &[2f64.sqrt()]).unwrap()[0]));
    assert!((b_diag(&[1.0], &[0.0], &[2f64.sqrt()]).unwrap()[0] - 1.0).abs() < 1e-15);
    assert_eq!(b_diag(&[0.7, 2.0], &[0.09, 0.25], &[0.3, 0.5]).unwrap(), vec![0.0, 0.0]);
    assert!(b_diag(&[0.0], &[0.0], &[1.0]).is_err());

    let mut rng = Rng::new(4);
    for _ in 0..20 {
        let g = DMatrix::from_fn(3, 3, |_, _| rng.normal());
        let sigma = &g * g.transpose() + DMatrix::identity(3, 3) * 0.5;
        let h = DMatrix::from_fn(3, 3, |_, _| rng.normal());
        let sigma_dot = &h + h.transpose();
        let l = DMatrix::from_fn(3, 3, |_, _| rng.normal());
        let b = b_matrix(&sigma, &sigma_dot, &l).unwrap();
        // Defining relation B Sigma + Sigma B^T = L L^T - Sigma_dot, via the explicit Kronecker solve.
        let lhs = &sigma * &b + &b * &sigma;
        let rhs = &l * l.transpose() - &sigma_dot;
        assert!((lhs - rhs).abs().max() < 1e-10);

        let s: Vec<f64> = (0..4).map(|_| rng.uniform() + 0.1).collect();
        let sd: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let ell: Vec<f64> = (0..4).map(|_| rng.uniform()).collect();
        let fast = b_diag(&s, &sd, &ell).unwrap();
        let dense = b_matrix(
            &DMatrix::from_diagonal(&s.clone().into()),
            &DMatrix::from_diagonal(&sd.clone().into()),
            &DMatrix::from_diagonal(&ell.clone().into()),
        )
        .unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { fast[i] } else { 0.0 };
                assert!((dense[(i, j)] - want).abs() < 1e-12);
            }
        }
    }
}

/// Mean and variance ODEs of `dz = (-a z + b) dt + l dW` integrated with fine RK4.
fn linear_moments(a: &[f64], b: &[f64], l: &[f64], mu0: &[f64], s0: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    let steps = ((t / 1e-4).ceil() as usize).max(1);
    let h = t / steps as f64;
    let rhs = |u: &[f64]| -> Vec<f64> {
        let mut d = vec![0.0; 2 * n];
        for i in 0..n {
            d[i] = -a[i] * u[i] + b[i];
            d[n + i] = -2.0 * a[i] * u[n + i] + l[i] * l[i];
        }
        d
    };
    let mut u: Vec<f64> = mu0.iter().chain(s0).copied().collect();
    for _ in 0..steps {
        let k1 = rhs(&u);
        let k2 = rhs(&u.iter().zip(&k1).map(|(x, k)| x + 0.5 * h * k).collect::<Vec<_>>());
        let k3 = rhs(&u.iter().zip(&k2).map(|(x, k)| x + 0.5 * h * k).collect::<Vec<_>>());
        let k4 = rhs(&u.iter().zip(&k3).map(|(x, k)| x + h * k).collect::<Vec<_>>());
        for i in 0..2 * n {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    (u[..n].to_vec(), u[n..].to_vec())
}

#[test]
fn linear_sde_reparametrisation() {
    let mut rng = Rng::new(12);
    for _ in 0..10 {
        let n = 1 + (rng.uniform() * 6.0) as usize;
        let a: Vec<f64> = (0..n).map(|_| 0.2 + 2.0 * rng.uniform()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let l: Vec<f64> = (0..n).map(|_| 0.1 + rng.uniform()).collect();
        let mu0: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let s0: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
        let (nodes, _) = gauss_legendre_on(64, 0.0, 1.0);
        for &t in &nodes {
            let (mu, sigma) = linear_moments(&a, &b, &l, &mu0, &s0, t);
            let mu_dot: Vec<f64> = (0..n).map(|i| -a[i] * mu[i] + b[i]).collect();
            let sigma_dot: Vec<f64> = (0..n).map(|i| -2.0 * a[i] * sigma[i] + l[i] * l[i]).collect();
            let bm = b_diag(&sigma, &sigma_dot, &l).unwrap();
            for i in 0..n {
                assert!((bm[i] - a[i]).abs() < 1e-6);
            }
            let pt = PathPoint { t, mu: mu.clone(), sigma: sigma.clone(), mu_dot, sigma_dot };
            let z: Vec<f64> = (0..n).map(|i| mu[i] + sigma[i].sqrt() * rng.normal()).collect();
            let gamma: Vec<f64> = (0..n).map(|i| -a[i] * z[i] + b[i]).collect();
            let r = drift_residual(&z, &pt, &gamma, &l).unwrap();
            assert!(r.iter().all(|v| v.abs() < 1e-6));
        }
    }
}

#[test]
fn constructed_drift_has_zero_residual() {
    let pt = PathPoint { t: 0.2, mu: vec![0.5, -1.0], sigma: vec![0.3, 0.8], mu_dot: vec![1.5, 0.2], sigma_dot: vec![0.1, -0.4] };
    let ell = [0.7, 0.2];
    let b = b_diag(&pt.sigma, &pt.sigma_dot, &ell).unwrap();
    let z = [0.9, -0.1];
    let gamma: Vec<f64> = (0..2).map(|i| -b[i] * z[i] + (pt.mu_dot[i] + b[i] * pt.mu[i])).collect();
    let r = drift_residual(&z, &pt, &gamma, &ell).unwrap();
    assert!(r.iter().all(|v| v.abs() < 1e-15));
}

fn tiny_setup(n_eta: usize, seed: u64) -> (SdeModel, ParamStore, Dataset, ModelConfig) {
    let grid = GridSpec::new(&[16], &[0.0], &[1.0], true, 1).unwrap();
    let scale = ScaleConfig {
        grid: grid.clone(),
        coarse: vec![4],
        kernel_factor: 4,
        micro_filters: vec![2, 3],
        micro_kernel: 3,
        init_sigma_z: 1e-2,
    };
    let cfg = ModelConfig {
        scale,
        dynamics: DynamicsConfig { macro_hidden: vec![5], micro_hidden: vec![4], init_dispersion: 0.3, ..Default::default() },
        init_precision: 20.0,
    };
    let model = cfg.build(n_eta).unwrap();
    let mut rng = Rng::new(seed);
    let mut params = init_params(&cfg.param_specs(&model), n_eta, &mut rng);
    for (name, t) in params.iter_mut() {
        if name.contains(".b") && !name.starts_with("sde") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let times: Vec<f64> = (0..9).map(|i| i as f64 * 0.05).collect();
    let trajectories: Vec<Trajectory> = (0..2)
        .map(|k| {
            let data: Vec<f64> = times
                .iter()
                .flat_map(|&t| (0..16).map(move |j| ((j as f64 / 16.0 - 0.3 * t) * std::f64::consts::TAU).sin() * (1.0 + k as f64 * 0.1)))
                .collect();
            Trajectory::new(times.clone(), Tensor::new(&[9, 16], data).unwrap()).unwrap()
        })
        .collect();
    let dataset = Dataset {
        grid,
        trajectories,
        splits: vec![Split::Train, Split::Val],
        noise_sigma: 0.0,
        generator: serde_json::Value::Null,
    };
    (model, params, dataset, cfg)
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let (model, params, data, _) = tiny_setup(2, 3);
    let segs = segment(&data.trajectories[0].times, 4).unwrap();
    let items: Vec<SegmentRef> = segs.iter().map(|s| SegmentRef { trajectory: 0, data: &data.trajectories[0], segment: s }).collect();
    let batch = ElboBatch::new(&items, 64, 1).unwrap();
    let report = grad_check(&params, &[], &|g, p, _| {
        let mut rng = Rng::new(99);
        elbo_g(g, p, &model, &batch, &mut rng).unwrap().total
    });
    assert!(report.len() > 20);
    for (name, err) in &report {
        assert!(*err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn elbo_terms_and_limits() {
    let (model, params, data, _) = tiny_setup(1, 5);
    let segs = segment(&data.trajectories[0].times, 4).unwrap();
    let items: Vec<SegmentRef> = segs.iter().map(|s| SegmentRef { trajectory: 0, data: &data.trajectories[0], segment: s }).collect();
    let batch = ElboBatch::new(&items, 64, 1).unwrap();
    let t = elbo(&model, &params, &batch, &mut Rng::new(1)).unwrap();
    assert!((t.total - (t.loglik - 0.5 * t.integral)).abs() < 1e-9 * t.total.abs().max(1.0));
    assert!(t.integral > 0.0);

    // With the marginals fixed, B grows like ell^2, so the path term grows like
    // ell^2 rather than vanishing; the likelihood term is unaffected.
    let with_ell = |ell: f64| {
        let mut p = params.clone();
        p.get_mut("sde.dispersion").unwrap().data_mut().iter_mut().for_each(|v| *v = ell);
        elbo(&model, &p, &batch, &mut Rng::new(1)).unwrap()
    };
    let (t3, t4) = (with_ell(1e3), with_ell(1e4));
    assert!((t4.integral / t3.integral - 100.0).abs() < 1.0, "{}", t4.integral / t3.integral);
    assert!((t4.loglik - t.loglik).abs() < 1e-9 * t.loglik.abs());

    // Segment order does not matter.
    let rev: Vec<SegmentRef> = items.iter().rev().copied().collect();
    let rb = ElboBatch::new(&rev, 64, 1).unwrap();
    let tr = elbo(&model, &params, &rb, &mut Rng::new(1)).unwrap();
    assert!((tr.total - t.total).abs() < 1e-10 * t.total.abs());

    // Non-finite values name the offending segment.
    let mut bad = params.clone();
    bad.get_mut("sde.dispersion").unwrap().data_mut()[0] = f64::NEG_INFINITY;
    let err = elbo(&model, &bad, &batch, &mut Rng::new(1)).unwrap_err().to_string();
    assert!(err.contains("trajectory 0 segment"), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let (model, params, _, cfg) = tiny_setup(2, 6);
    let ck = Checkpoint { model: cfg, n_eta: 2, stage: 2, step: 17, val_eps: Some(0.25), meta: serde_json::json!({"k": 1.5}), params };
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.instantiate().unwrap().n_z(), model.n_z());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut wrong = bytes;
    wrong[0] = b'X';
    assert!(Checkpoint::from_bytes(&wrong).is_err());
}

#[test]
fn staged_training_runs_and_resumes() {
    let (_, _, data, cfg) = tiny_setup(0, 0);
    let tc = TrainConfig { n_eta_target: 2, segment_len: 4, n_quad: 16, batch_size: 2, steps_per_stage: 6, val_every: 3, val_paths: 2, seed: 4, ..Default::default() };
    let mut rows = Vec::new();
    let out = train(&data, &cfg, &tc, serde_json::Value::Null, None, &mut |r| rows.push(r.clone())).unwrap();
    assert!(out.aborted.is_none());
    assert_eq!(out.stages.len(), 3);
    assert_eq!(out.stages.iter().map(|c| c.n_eta).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(rows.windows(2).all(|w| w[1].step > w[0].step));
    let stages: std::collections::BTreeSet<usize> = rows.iter().map(|r| r.stage).collect();
    assert_eq!(stages.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);

    let single = TrainConfig { n_eta_target: 0, ..tc.clone() };
    let one = train(&data, &cfg, &single, serde_json::Value::Null, None, &mut |_| {}).unwrap();
    assert_eq!(one.stages.len(), 1);

    // Resuming from a saved checkpoint repeats the uninterrupted run's ELBO at that step.
    let short = TrainConfig { n_eta_target: 1, steps_per_stage: 3, ..tc.clone() };
    let partial = train(&data, &cfg, &short, serde_json::Value::Null, None, &mut |_| {}).unwrap();
    assert_eq!(partial.finals.len(), 2);
    let ck = Checkpoint::from_bytes(&partial.finals[0].to_bytes().unwrap()).unwrap();
    assert_eq!((ck.stage, ck.step), (0, 3));
    let mut resumed = Vec::new();
    train(&data, &cfg, &tc, serde_json::Value::Null, Some(&ck), &mut |r| resumed.push(r.clone())).unwrap();
    let first = &resumed[0];
    let original = rows.iter().find(|r| r.step == first.step).unwrap();
    assert_eq!((first.stage, first.n_eta), (ck.stage, ck.n_eta));
    assert_eq!(first.elbo.to_bits(), original.elbo.to_bits());
    let model = ck.instantiate().unwrap();
    let direct = step_elbo(&model, &ck.params, &data, &tc, ck.stage, ck.step).unwrap();
    assert_eq!(direct.total.to_bits(), original.elbo.to_bits());

    // Determinism of the whole loop.
    let again = train(&data, &cfg, &tc, serde_json::Value::Null, None, &mut |_| {}).unwrap();
    assert_eq!(again.last().params, out.last().params);
}
