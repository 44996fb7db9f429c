use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ModelConfig};
use super::elbo::{elbo_g, read_terms, ElboBatch, ElboTerms, SegmentRef};
use super::segment::{segment, Segment};
use crate::compute::{grow_params, init_params, AdamConfig, AdamState, Graph, ParamStore, Rng, Tensor};
use crate::datagen::{Dataset, Split, Trajectory};
use crate::dynamics::SdeModel;
use crate::predict::{error_metric, posterior_predict};
use crate::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Stages run for `n_eta = 0, 1, ..., n_eta_target`.
    pub n_eta_target: usize,
    pub segment_len: usize,
    pub n_quad: usize,
    pub n_mc: usize,
    pub batch_size: usize,
    pub steps_per_stage: u64,
    /// Learning rate of the first (`n_eta = 0`) stage.
    pub lr_first: f64,
    /// Learning rate of every later stage.
    pub lr_next: f64,
    pub decay: f64,
    pub decay_every: u64,
    /// Validation period in steps; validation also runs at the start and end of a stage.
    pub val_every: u64,
    pub val_paths: usize,
    /// Validation trajectories are cut to `t <= t0 + val_horizon`.
    #[serde(default)]
    pub val_horizon: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_eta_target: 2,
            segment_len: 10,
            n_quad: 64,
            n_mc: 1,
            batch_size: 64,
            steps_per_stage: 2000,
            lr_first: 1e-3,
            lr_next: 1e-4,
            decay: 0.9,
            decay_every: 2000,
            val_every: 250,
            val_paths: 16,
            val_horizon: None,
            seed: 0,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    /// Monotone across stages.
    pub step: u64,
    pub stage: usize,
    pub n_eta: usize,
    pub loglik: f64,
    pub integral: f64,
    pub elbo: f64,
    pub val_eps: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation checkpoint of every completed stage.
    pub stages: Vec<Checkpoint>,
    /// Parameters at the end of every completed stage, for resuming longer runs.
    pub finals: Vec<Checkpoint>,
    /// Set when training stopped on a non-finite ELBO or gradient.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    /// Checkpoint of the last stage reached.
    pub fn last(&self) -> &Checkpoint {
        self.stages.last().expect("training produces at least one checkpoint")
    }
}

/// Noise and batch choice for `(stage, step)`; depends on nothing else.
pub fn step_rng(seed: u64, stage: usize, step: u64) -> Rng {
    Rng::new(seed).substream(stage as u64).substream(step)
}

fn segment_pool<'a>(trajs: &[(usize, &'a Trajectory)], segs: &'a [Segment]) -> Vec<SegmentRef<'a>> {
    trajs
        .iter()
        .flat_map(|&(id, data)| segs.iter().map(move |segment| SegmentRef { trajectory: id, data, segment }))
        .collect()
}

fn choose<'a>(pool: &[SegmentRef<'a>], size: usize, rng: &mut Rng) -> Vec<SegmentRef<'a>> {
    let perm = rng.permutation(pool.len());
    perm.into_iter().take(size.min(pool.len())).map(|i| pool[i]).collect()
}

/// ELBO that training evaluates at `(stage, step)` for the given parameters.
pub fn step_elbo(
    model: &SdeModel,
    params: &ParamStore,
    dataset: &Dataset,
    cfg: &TrainConfig,
    stage: usize,
    step: u64,
) -> Result<ElboTerms> {
    let trajs = training_set(dataset)?;
    let segs = segment(&trajs[0].1.times, cfg.segment_len)?;
    let pool = segment_pool(&trajs, &segs);
    let mut rng = step_rng(cfg.seed, stage, step);
    let batch = ElboBatch::new(&choose(&pool, cfg.batch_size, &mut rng), cfg.n_quad, cfg.n_mc)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let vars = elbo_g(&mut g, &p, model, &batch, &mut rng)?;
    read_terms(&g, &batch, &vars)
}

fn training_set(dataset: &Dataset) -> Result<Vec<(usize, &Trajectory)>> {
    let trajs: Vec<(usize, &Trajectory)> = dataset
        .trajectories
        .iter()
        .enumerate()
        .filter(|(i, _)| dataset.splits[*i] == Split::Train)
        .collect();
    if trajs.is_empty() {
        return invalid("dataset has no training trajectories");
    }
    Ok(trajs)
}

/// Mean relative error of the predictive mean over the trajectories and all their times.
pub fn mean_prediction_error(
    model: &SdeModel,
    params: &ParamStore,
    trajs: &[&Trajectory],
    n_paths: usize,
    rng: &Rng,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (k, tr) in trajs.iter().enumerate() {
        let dt = tr.times[1] - tr.times[0];
        let y0 = Tensor::vector(tr.state(0).to_vec());
        let mix = posterior_predict(model, params, &y0, &tr.times, n_paths, dt, &rng.substream(k as u64))?;
        for (i, m) in mix.iter().enumerate() {
            total += error_metric(tr.state(i), m)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Hierarchical training: an implicit-scale stage, then one stage per added
/// microscale dimension, each warm-started from the previous stage's best
/// validation checkpoint. `resume` re-enters a saved stage at the step its
/// parameters were captured, so that step's ELBO repeats exactly.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    meta: serde_json::Value,
    resume: Option<&Checkpoint>,
    log: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    dataset.validate()?;
    if cfg.batch_size == 0 || cfg.steps_per_stage == 0 || cfg.val_every == 0 || cfg.val_paths == 0 {
        return invalid("batch size, steps, validation period and paths must be positive");
    }
    let trajs = training_set(dataset)?;
    if trajs[0].1.n_t() < 2 {
        return invalid("trajectories need at least two observations");
    }
    let segs = segment(&trajs[0].1.times, cfg.segment_len)?;
    let pool = segment_pool(&trajs, &segs);
    let mut val: Vec<&Trajectory> = dataset.split(Split::Val);
    if val.is_empty() {
        val = trajs.iter().map(|t| t.1).collect();
    }
    let val_cut: Vec<Trajectory> = match cfg.val_horizon {
        Some(h) => val.iter().map(|t| t.truncated(h)).collect(),
        None => Vec::new(),
    };
    if cfg.val_horizon.is_some() {
        if val_cut[0].n_t() < 2 {
            return invalid("validation horizon keeps fewer than two observations");
        }
        val = val_cut.iter().collect();
    }
    let val_rng = Rng::new(cfg.seed).substream(u64::MAX);
    let init_rng = Rng::new(cfg.seed).substream(u64::MAX - 1);

    let mut stages: Vec<Checkpoint> = Vec::new();
    let mut finals: Vec<Checkpoint> = Vec::new();
    let first_stage = resume.map_or(0, |c| c.stage);
    // Each stage logs its steps plus one closing validation row.
    let global = |stage: usize, step: u64| stage as u64 * (cfg.steps_per_stage + 1) + step;
    for stage in first_stage..=cfg.n_eta_target {
        let n_eta = stage;
        let model = model_cfg.build(n_eta)?;
        let specs = model_cfg.param_specs(&model);
        let mut grow_rng = init_rng.substream(stage as u64);
        let (mut params, start_step) = match (resume, stages.last()) {
            (Some(c), _) if stage == first_stage => {
                c.instantiate()?;
                if c.n_eta != n_eta {
                    return invalid("checkpoint stage and n_eta disagree");
                }
                (c.params.clone(), c.step)
            }
            (_, Some(prev)) => (grow_params(&prev.params, &specs, prev.n_eta, n_eta, &mut grow_rng), 0),
            _ => (init_params(&specs, n_eta, &mut grow_rng), 0),
        };
        let lr = if stage == 0 { cfg.lr_first } else { cfg.lr_next };
        let mut adam = AdamState::new(AdamConfig { lr, decay: cfg.decay, decay_every: cfg.decay_every, ..AdamConfig::new(lr) });
        adam.step = start_step;
        let mut best: Option<Checkpoint> = None;
        let mut aborted = None;
        let validate = |params: &ParamStore, step: u64, best: &mut Option<Checkpoint>| -> Result<f64> {
            let eps = mean_prediction_error(&model, params, &val, cfg.val_paths, &val_rng)?;
            let better = eps.is_finite() && best.as_ref().and_then(|b| b.val_eps).is_none_or(|b| eps < b);
            if better {
                *best = Some(Checkpoint {
                    model: model_cfg.clone(),
                    n_eta,
                    stage,
                    step,
                    val_eps: Some(eps),
                    meta: meta.clone(),
                    params: params.clone(),
                });
            }
            Ok(eps)
        };
        for step in start_step..cfg.steps_per_stage {
            let mut val_eps = None;
            if step % cfg.val_every == 0 {
                val_eps = Some(validate(&params, step, &mut best).unwrap_or(f64::NAN));
            }
            let mut rng = step_rng(cfg.seed, stage, step);
            let batch = ElboBatch::new(&choose(&pool, cfg.batch_size, &mut rng), cfg.n_quad, cfg.n_mc)?;
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let vars = elbo_g(&mut g, &p, &model, &batch, &mut rng)?;
            let terms = match read_terms(&g, &batch, &vars) {
                Ok(t) => t,
                Err(e) => {
                    aborted = Some(format!("stage {stage} step {step}: {e}"));
                    break;
                }
            };
            let loss = g.scale(vars.total, -1.0 / batch.segments() as f64)?;
            let lr_now = adam.current_lr();
            let grads = g.param_grads(loss)?;
            if let Err(e) = adam.step(&mut params, &grads) {
                aborted = Some(format!("stage {stage} step {step}: {e}"));
                break;
            }
            log(&LogRow {
                step: global(stage, step),
                stage,
                n_eta,
                loglik: terms.loglik,
                integral: terms.integral,
                elbo: terms.total,
                val_eps,
                lr: lr_now,
            });
        }
        if aborted.is_none() {
            let final_step = cfg.steps_per_stage;
            let eps = validate(&params, final_step, &mut best).unwrap_or(f64::NAN);
            log(&LogRow {
                step: global(stage, final_step),
                stage,
                n_eta,
                loglik: f64::NAN,
                integral: f64::NAN,
                elbo: f64::NAN,
                val_eps: Some(eps),
                lr: adam.current_lr(),
            });
            finals.push(Checkpoint {
                model: model_cfg.clone(),
                n_eta,
                stage,
                step: final_step,
                val_eps: eps.is_finite().then_some(eps),
                meta: meta.clone(),
                params: params.clone(),
            });
        }
        match best {
            Some(b) => stages.push(b),
            None if stages.is_empty() => {
                return Err(Error::NonFinite(aborted.unwrap_or_else(|| "validation never produced a finite error".into())))
            }
            None => {}
        }
        if aborted.is_some() {
            return Ok(TrainOutcome { stages, finals, aborted });
        }
    }
    Ok(TrainOutcome { stages, finals, aborted: None })
}
