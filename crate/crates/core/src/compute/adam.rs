use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ComputeError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate every `decay_every` steps.
    pub decay: f64,
    pub decay_every: u64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, decay: 0.9, decay_every: 2000 }
    }
}

/// Adam moments plus a stepwise exponential learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        Self { config, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Learning rate that the next step will use.
    pub fn current_lr(&self) -> f64 {
        let k = if self.config.decay_every == 0 { 0 } else { self.step / self.config.decay_every };
        self.config.lr * self.config.decay.powi(k as i32)
    }

    /// Applies one update to every parameter in `params`.
    ///
    /// Each parameter must have a gradient of identical shape; a non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<(), ComputeError> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| ComputeError::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(ComputeError::Shape {
                    node: name.clone(),
                    detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(ComputeError::NonFiniteGradient(name.clone()));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                md[j] = c.beta1 * md[j] + (1.0 - c.beta1) * gj;
                vd[j] = c.beta2 * vd[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = md[j] / bc1;
                let vhat = vd[j] / bc2;
                pd[j] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
