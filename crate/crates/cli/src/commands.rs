use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde_json::json;

use mssde_core::baselines::{coarse_dns, dmd_fit_pairs, dmd_predict, sindy_fit, sindy_predict, DmdModel, SindyModel};
use mssde_core::compute::{Rng, Tensor};
use mssde_core::datagen::{
    generate_dataset, read_dataset, sidecar_path, write_dataset, Dataset, GeneratorConfig, Split, Trajectory,
};
use mssde_core::inference::{segment, train, Checkpoint, LogRow};
use mssde_core::likelihood::{reconstruct, PoeParams};
use mssde_core::predict::{error_metric, export_spectrum, posterior_predict, predictive_moments, relative_error, ErrorReport};

use crate::manifest::RunManifest;
use crate::{CliError, Command, Config};

pub fn dispatch(cmd: Command, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let mut manifest = RunManifest::new(cmd.name(), cfg.seed()?, cfg.as_json(), &cfg.snapshot());
    let start = Instant::now();
    let result = match cmd {
        Command::Generate => generate(cfg, out, &mut manifest),
        Command::Train => train_cmd(cfg, out, &mut manifest),
        Command::Predict => predict_cmd(cfg, out, &mut manifest, true),
        Command::Evaluate => predict_cmd(cfg, out, &mut manifest, false),
        Command::Baseline => baseline_cmd(cfg, out, &mut manifest),
    };
    manifest.time("total", start);
    // Partial outputs of a failed run are still recorded.
    if result.is_ok() || !manifest.outputs.is_empty() {
        manifest.write(out)?;
    }
    result
}

fn resolve(out: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        out.join(p)
    }
}

fn file_key(cfg: &Config, out: &Path, key: &str) -> Result<PathBuf, CliError> {
    cfg.path(key).map(|p| resolve(out, p)).ok_or_else(|| CliError::Usage(format!("config key `{key}` is required")))
}

fn write_file(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    manifest.output(path)
}

fn write_json(path: &Path, value: &serde_json::Value, manifest: &mut RunManifest) -> Result<(), CliError> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("json value serialises") + "\n"), manifest)
}

fn load_dataset(cfg: &Config, out: &Path, manifest: &mut RunManifest) -> Result<Dataset, CliError> {
    let path = file_key(cfg, out, "dataset")?;
    let data = read_dataset(&path)?;
    manifest.input(&path)?;
    Ok(data)
}

fn load_checkpoint(path: &Path, manifest: &mut RunManifest) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path)?;
    manifest.input(path)?;
    Ok(ck)
}

/// Trajectories of `split`, cut to the evaluation horizon.
fn split_trajectories(cfg: &Config, data: &Dataset, split: Split) -> Result<Vec<(usize, Trajectory)>, CliError> {
    let horizon = cfg.eval_horizon(&data.generator)?;
    let trajs: Vec<(usize, Trajectory)> = data
        .trajectories
        .iter()
        .enumerate()
        .filter(|(i, _)| data.splits[*i] == split)
        .map(|(i, t)| (i, horizon.map_or_else(|| t.clone(), |h| t.truncated(h))))
        .collect();
    if trajs.first().is_some_and(|t| t.1.n_t() < 2) {
        return Err(CliError::Usage("evaluation horizon keeps fewer than two observations".into()));
    }
    Ok(trajs)
}

fn eval_split(cfg: &Config, data: &Dataset) -> Result<(Split, Vec<(usize, Trajectory)>), CliError> {
    let split = Split::parse(cfg.get("split")).ok_or_else(|| CliError::Usage(format!("unknown split `{}`", cfg.get("split"))))?;
    let trajs = split_trajectories(cfg, data, split)?;
    if trajs.is_empty() {
        return Err(CliError::Data(format!("dataset has no {} trajectories", split.as_str())));
    }
    Ok((split, trajs))
}

fn borrowed(trajs: &[(usize, Trajectory)]) -> Vec<(usize, &Trajectory)> {
    trajs.iter().map(|(i, t)| (*i, t)).collect()
}

fn summary_json(method: &str, split: Split, report: &ErrorReport) -> serde_json::Value {
    json!({
        "method": method,
        "split": split.as_str(),
        "trajectories": report.trajectory_ids.len(),
        "mean": report.mean,
        "std": report.std,
        "trajectory_means": report.trajectory_means,
    })
}

fn generate(cfg: &Config, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let gen = cfg.generator()?;
    let t = Instant::now();
    let data = generate_dataset(&gen)?;
    manifest.time("generate", t);
    let path = file_key(cfg, out, "dataset")?;
    write_dataset(&path, &data)?;
    manifest.output(&path)?;
    manifest.output(&sidecar_path(&path))?;
    println!(
        "wrote {} trajectories ({} train, {} val, {} test) to {}",
        data.trajectories.len(),
        data.count(Split::Train),
        data.count(Split::Val),
        data.count(Split::Test),
        path.display()
    );
    Ok(())
}

fn opt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

pub const LOG_HEADER: &str = "step,stage,n_eta,loglik,integral,elbo,val_eps,lr\n";

pub fn log_line(r: &LogRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{}\n",
        r.step,
        r.stage,
        r.n_eta,
        opt(r.loglik),
        opt(r.integral),
        opt(r.elbo),
        r.val_eps.map(opt).unwrap_or_default(),
        r.lr
    )
}

fn train_cmd(cfg: &Config, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let data = load_dataset(cfg, out, manifest)?;
    let model_cfg = cfg.model(&data.grid, data.noise_sigma)?;
    let n_train = data.count(Split::Train);
    let times = &data.trajectories.first().ok_or_else(|| CliError::Data("dataset is empty".into()))?.times;
    let segments = segment(times, cfg.parsed("segment_len")?)?.len() * n_train;
    let tc = cfg.train(segments, cfg.eval_horizon(&data.generator)?)?;
    let resume = match cfg.path("resume") {
        Some(p) => Some(load_checkpoint(&resolve(out, p), manifest)?),
        None => None,
    };
    let meta = json!({ "config": cfg.as_json(), "dataset": manifest.inputs[0].hash });
    let mut log = String::from(LOG_HEADER);
    let t = Instant::now();
    let outcome = train(&data, &model_cfg, &tc, meta, resume.as_ref(), &mut |r| {
        log.push_str(&log_line(r));
        if r.val_eps.is_some() {
            eprintln!("stage {} step {} val eps {}", r.stage, r.step, r.val_eps.map(opt).unwrap_or_default());
        }
    });
    manifest.time("train", t);
    let outcome = outcome?;
    write_file(&out.join("train_log.csv"), &log, manifest)?;
    let mut stages = Vec::new();
    for (best, last) in outcome.stages.iter().zip(outcome.finals.iter().map(Some).chain(std::iter::repeat(None))) {
        let path = out.join(format!("checkpoint_stage{}.msck", best.stage));
        best.save(&path)?;
        manifest.output(&path)?;
        if let Some(last) = last {
            let path = out.join(format!("final_stage{}.msck", last.stage));
            last.save(&path)?;
            manifest.output(&path)?;
        }
        stages.push(json!({ "stage": best.stage, "n_eta": best.n_eta, "best_step": best.step, "val_eps": best.val_eps }));
    }
    let main = file_key(cfg, out, "checkpoint")?;
    outcome.last().save(&main)?;
    manifest.output(&main)?;
    write_json(
        &out.join("train_summary.json"),
        &json!({ "stages": stages, "steps_per_stage": tc.steps_per_stage, "aborted": outcome.aborted }),
        manifest,
    )?;
    match outcome.aborted {
        Some(msg) => Err(CliError::Numerical(msg)),
        None => Ok(()),
    }
}

fn predict_cmd(cfg: &Config, out: &Path, manifest: &mut RunManifest, full: bool) -> Result<(), CliError> {
    let data = load_dataset(cfg, out, manifest)?;
    let (split, owned) = eval_split(cfg, &data)?;
    let ck = load_checkpoint(&file_key(cfg, out, "checkpoint")?, manifest)?;
    if ck.model.scale.grid != data.grid {
        return Err(CliError::Data(format!(
            "checkpoint grid {:?} does not match dataset grid {:?}",
            ck.model.scale.grid.points, data.grid.points
        )));
    }
    let model = ck.instantiate()?;
    let trajs = borrowed(&owned);
    let n_paths: usize = cfg.parsed("n_paths")?;
    let root = Rng::new(cfg.seed()?);
    let name = if full { "predict" } else { "evaluate" };
    let mut moments = String::from("trajectory_id,t,index,mean,var\n");
    let mut eps = Vec::new();
    let t = Instant::now();
    for &(id, tr) in &trajs {
        if tr.n_t() < 2 {
            return Err(CliError::Data("trajectories need at least two times".into()));
        }
        let dt = tr.times[1] - tr.times[0];
        let y0 = Tensor::vector(tr.state(0).to_vec());
        let mix = posterior_predict(&model, &ck.params, &y0, &tr.times, n_paths, dt, &root.substream(id as u64))?;
        let mut row = Vec::with_capacity(mix.len());
        for (i, m) in mix.iter().enumerate() {
            row.push(error_metric(tr.state(i), m)?);
            if full {
                let mo = predictive_moments(m);
                for (j, (mu, var)) in mo.mean.iter().zip(&mo.var).enumerate() {
                    let _ = writeln!(moments, "{id},{},{j},{mu},{var}", m.t);
                }
            }
        }
        eps.push(row);
    }
    manifest.time("predict", t);
    let report = ErrorReport::new(trajs.iter().map(|t| t.0).collect(), trajs[0].1.times.clone(), eps)?;
    write_file(&out.join(format!("{name}_errors.csv")), &report.to_csv(), manifest)?;
    let mut summary = summary_json("mssde", split, &report);
    summary["n_eta"] = json!(ck.n_eta);
    summary["n_paths"] = json!(n_paths);
    write_json(&out.join(format!("{name}_summary.json")), &summary, manifest)?;
    if full {
        write_file(&out.join("predict_moments.csv"), &moments, manifest)?;
        if data.grid.dim() == 1 && data.grid.periodic && data.grid.fields == 1 {
            let spectrum = spectrum_csv(&model, &ck, trajs[0])?;
            write_file(&out.join("predict_spectrum.csv"), &spectrum, manifest)?;
        }
    }
    println!("{name}: {} on {} {} trajectories: mean {} std {}", ck.n_eta, trajs.len(), split.as_str(), report.mean, report.std);
    Ok(())
}

/// Amplitude spectra of the observation, the reconstruction of its encoding and
/// the prolonged macroscale state, at the first and last time.
fn spectrum_csv(model: &mssde_core::dynamics::SdeModel, ck: &Checkpoint, (id, tr): (usize, &Trajectory)) -> Result<String, CliError> {
    let poe = PoeParams::from_store(&ck.params)?;
    let mut s = String::from("trajectory_id,t,wavenumber,observed,reconstruction,macroscale\n");
    for i in [0, tr.n_t() - 1] {
        let y = Tensor::vector(tr.state(i).to_vec());
        let enc = model.scales.encode(&ck.params, &y)?;
        let rec = reconstruct(&model.scales, &ck.params, &poe, &enc.mean)?;
        let zeta = Tensor::vector(enc.mean.data()[..model.n_zeta()].to_vec());
        let macro_state = model.scales.prolong(&ck.params, &zeta)?;
        let (a, b, c) = (export_spectrum(y.data()), export_spectrum(rec.mean.data()), export_spectrum(macro_state.data()));
        for k in 0..a.len() {
            if a[k].0 >= 0 {
                let _ = writeln!(s, "{id},{},{},{},{},{}", tr.times[i], a[k].0, a[k].1, b[k].1, c[k].1);
            }
        }
    }
    Ok(s)
}

/// Latent dimension used by the baselines: `latent_dim`, else the checkpoint's
/// `n_z`, else `n_zeta + n_eta` from the config.
fn baseline_latent(cfg: &Config, out: &Path, data: &Dataset) -> Result<usize, CliError> {
    if let Some(r) = cfg.path("latent_dim") {
        return cfg.parsed("latent_dim").map_err(|_| CliError::Usage(format!("bad latent_dim {}", r.display())));
    }
    if let Some(path) = cfg.path("checkpoint").map(|p| resolve(out, p)).filter(|p| p.exists()) {
        return Ok(Checkpoint::load(&path)?.instantiate()?.n_z());
    }
    let model = cfg.model(&data.grid, data.noise_sigma)?;
    let n_eta: usize = cfg.parsed("n_eta")?;
    Ok(model.build(n_eta)?.n_z())
}

fn rollout_errors(tr: &Trajectory, states: &Tensor) -> Result<Vec<f64>, CliError> {
    (0..states.shape()[0]).map(|i| Ok(relative_error(tr.state(i), states.row(i))?)).collect()
}

struct MethodResult {
    name: &'static str,
    report: ErrorReport,
    detail: serde_json::Value,
}

fn run_dns(cfg: &Config, data: &Dataset, trajs: &[(usize, &Trajectory)]) -> Result<MethodResult, CliError> {
    let gen: GeneratorConfig = serde_json::from_value(data.generator.clone())
        .map_err(|e| CliError::Data(format!("coarse DNS needs the generator settings in the dataset metadata: {e}")))?;
    let mut coarse: Vec<usize> = if cfg.get("dns_coarse").is_empty() { cfg.list("coarse")? } else { cfg.list("dns_coarse")? };
    if coarse.len() == 1 && data.grid.dim() == 2 {
        coarse.push(coarse[0]);
    }
    let mut eps = Vec::new();
    for &(_, tr) in trajs {
        let run = coarse_dns(&gen.problem, &data.grid, &coarse, tr.state(0), &tr.times, gen.save_every)?;
        eps.push(rollout_errors(tr, &run.states)?);
    }
    let report = ErrorReport::new(trajs.iter().map(|t| t.0).collect(), trajs[0].1.times.clone(), eps)?;
    Ok(MethodResult { name: "coarse_dns", report, detail: json!({ "coarse": coarse, "substeps": gen.save_every }) })
}

fn pairs(train: &[&Trajectory]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n_y = train[0].n_y();
    let cols: usize = train.iter().map(|t| t.n_t() - 1).sum();
    let (mut x1, mut x2) = (DMatrix::zeros(n_y, cols), DMatrix::zeros(n_y, cols));
    let mut c = 0;
    for t in train {
        for i in 0..t.n_t() - 1 {
            x1.column_mut(c).copy_from_slice(t.state(i));
            x2.column_mut(c).copy_from_slice(t.state(i + 1));
            c += 1;
        }
    }
    (x1, x2)
}

fn run_dmd(cfg: &Config, r: usize, train: &[&Trajectory], trajs: &[(usize, &Trajectory)]) -> Result<MethodResult, CliError> {
    let (x1, x2) = pairs(train);
    let lambda: f64 = cfg.parsed("dmd_lambda")?;
    let model: DmdModel = dmd_fit_pairs(&x1, &x2, r, lambda)?;
    if let Some(w) = &model.warning {
        eprintln!("dmd: {w}");
    }
    let mut eps = Vec::new();
    for &(_, tr) in trajs {
        eps.push(rollout_errors(tr, &dmd_predict(&model, tr.state(0), tr.n_t() - 1)?)?);
    }
    let report = ErrorReport::new(trajs.iter().map(|t| t.0).collect(), trajs[0].1.times.clone(), eps)?;
    let detail = json!({ "rank": model.rank, "lambda": lambda, "warning": model.warning });
    Ok(MethodResult { name: "dmd", report, detail })
}

fn sindy_errors(model: &SindyModel, trajs: &[(usize, &Trajectory)]) -> Result<(Vec<Vec<f64>>, Vec<usize>), CliError> {
    let mut eps = Vec::new();
    let mut blown = Vec::new();
    for &(id, tr) in trajs {
        let roll = sindy_predict(model, tr.state(0), &tr.times, 1)?;
        if roll.blew_up {
            blown.push(id);
        }
        eps.push(rollout_errors(tr, &roll.trajectory.states)?);
    }
    Ok((eps, blown))
}

fn run_sindy(
    cfg: &Config,
    r: usize,
    train: &[&Trajectory],
    select: &[(usize, &Trajectory)],
    trajs: &[(usize, &Trajectory)],
) -> Result<MethodResult, CliError> {
    let (orders, taus) = cfg.sindy_grid()?;
    let dt = train[0].times[1] - train[0].times[0];
    let mut best: Option<(f64, SindyModel)> = None;
    let mut searched = Vec::new();
    for &order in &orders {
        for &tau in &taus {
            let model = sindy_fit(train, r, order, tau, dt)?;
            let (eps, blown) = sindy_errors(&model, select)?;
            let score = ErrorReport::new(select.iter().map(|t| t.0).collect(), select[0].1.times.clone(), eps)?.mean;
            searched.push(json!({ "order": order, "threshold": tau, "selection_eps": opt(score), "blew_up": blown.len() }));
            if score.is_finite() && best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, model));
            }
        }
    }
    let (_, model) = best.ok_or_else(|| CliError::Numerical("every POD-SINDy candidate produced non-finite errors".into()))?;
    let (eps, blown) = sindy_errors(&model, trajs)?;
    let report = ErrorReport::new(trajs.iter().map(|t| t.0).collect(), trajs[0].1.times.clone(), eps)?;
    let detail = json!({
        "rank": r,
        "order": model.order,
        "threshold": model.threshold,
        "converged": model.converged,
        "truncated_trajectories": blown,
        "search": searched,
    });
    Ok(MethodResult { name: "pod_sindy", report, detail })
}

fn baseline_cmd(cfg: &Config, out: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let data = load_dataset(cfg, out, manifest)?;
    let (split, owned) = eval_split(cfg, &data)?;
    let trajs = borrowed(&owned);
    let r = baseline_latent(cfg, out, &data)?;
    let train: Vec<&Trajectory> = data.split(Split::Train);
    if train.is_empty() || train[0].n_t() < 3 {
        return Err(CliError::Data("baselines need training trajectories with at least three times".into()));
    }
    let mut select = split_trajectories(cfg, &data, Split::Val)?;
    if select.is_empty() {
        select = data.trajectories.iter().enumerate().filter(|(i, _)| data.splits[*i] == Split::Train).map(|(i, t)| (i, t.clone())).collect();
    }
    let select = borrowed(&select);
    let t = Instant::now();
    let (dns, (dmd, sindy)) = rayon::join(
        || run_dns(cfg, &data, &trajs),
        || rayon::join(|| run_dmd(cfg, r, &train, &trajs), || run_sindy(cfg, r, &train, &select, &trajs)),
    );
    manifest.time("baselines", t);
    let results = [dns?, dmd?, sindy?];
    let mut table = String::from("method,latent_dim,mean,std\n");
    let mut methods = Vec::new();
    for m in &results {
        write_file(&out.join(format!("baseline_{}_errors.csv", m.name)), &m.report.to_csv(), manifest)?;
        let dim = if m.name == "coarse_dns" { m.detail["coarse"].as_array().map_or(0, |c| c.iter().filter_map(|v| v.as_u64()).product::<u64>() as usize) } else { r };
        let _ = writeln!(table, "{},{},{},{}", m.name, dim, m.report.mean, m.report.std);
        let mut s = summary_json(m.name, split, &m.report);
        s["latent_dim"] = json!(dim);
        s["detail"] = m.detail.clone();
        methods.push(s);
        println!("{}: mean {} std {}", m.name, m.report.mean, m.report.std);
    }
    write_file(&out.join("baselines.csv"), &table, manifest)?;
    write_json(&out.join("baseline_summary.json"), &json!({ "latent_dim": r, "methods": methods }), manifest)?;
    Ok(())
}
