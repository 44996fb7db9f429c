//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mssde_core::datagen::{GeneratorConfig, GridSpec};
use mssde_core::dynamics::DynamicsConfig;
use mssde_core::inference::{ModelConfig, TrainConfig};
use mssde_core::scales::ScaleConfig;

use crate::CliError;

/// Every accepted key with its default; `""` means unset.
const KEYS: &[(&str, &str)] = &[
    // data generation
    ("preset", "advection-desk"),
    ("grid_points", ""),
    ("t_end", ""),
    ("dt", ""),
    ("save_every", ""),
    ("n_train", ""),
    ("n_val", ""),
    ("n_test", ""),
    ("noise_sigma", ""),
    ("data_seed", ""),
    // "none" scores whole trajectories; unset defers to the dataset metadata
    ("eval_horizon", ""),
    // files
    ("dataset", "dataset.mst1"),
    ("checkpoint", "checkpoint.msck"),
    ("resume", ""),
    ("split", "test"),
    // model
    ("coarse", "20"),
    ("kernel_factor", "6"),
    ("micro_filters", "4,16,32"),
    ("micro_kernel", "9"),
    ("init_sigma_z", "0.01"),
    ("stencil_q", "2"),
    ("macro_hidden", "64,64"),
    ("micro_hidden", "64,64"),
    ("positional", "false"),
    ("init_dispersion", "0.01"),
    ("time_scale", "1"),
    ("init_precision", ""),
    // training
    ("n_eta", "2"),
    ("segment_len", "10"),
    ("n_quad", "64"),
    ("n_mc", "1"),
    ("batch_size", "64"),
    ("steps_per_stage", "2000"),
    ("epochs", ""),
    ("lr_first", "0.001"),
    ("lr_next", "0.0001"),
    ("decay", "0.9"),
    ("decay_every", "2000"),
    ("val_every", "250"),
    ("val_paths", "16"),
    ("seed", "0"),
    // prediction
    ("n_paths", "64"),
    // baselines
    ("latent_dim", ""),
    ("dns_coarse", ""),
    ("dmd_lambda", "0.01"),
    ("sindy_orders", "1,2"),
    ("sindy_thresholds", "0.0001,0.001,0.01,0.1"),
];

/// Resolved configuration: defaults overlaid with file entries and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl Config {
    pub fn defaults() -> Self {
        Self { values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::defaults();
        let mut seen = std::collections::BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| usage(format!("config line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(usage(format!("config line {}: key `{k}` given twice", no + 1)));
            }
            cfg.set(k, v).map_err(|e| usage(format!("config line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(usage(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("config key `{key}` is not declared"))
    }

    fn is_set(&self, key: &str) -> bool {
        !self.get(key).is_empty()
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        self.get(key).parse().map_err(|_| usage(format!("config key `{key}`: cannot parse `{}`", self.get(key))))
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        if self.is_set(key) {
            self.parsed(key).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| usage(format!("config key `{key}`: cannot parse `{s}`"))))
            .collect()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.is_set(key).then(|| PathBuf::from(self.get(key)))
    }

    /// Resolved `key=value` lines in key order, as embedded in outputs.
    pub fn snapshot(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn as_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.values).expect("string map serialises")
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.parsed("seed")
    }

    pub fn generator(&self) -> Result<GeneratorConfig, CliError> {
        let name = self.get("preset");
        let mut g = GeneratorConfig::preset(name).ok_or_else(|| {
            usage(format!("unknown preset `{name}`; choose one of {}", GeneratorConfig::preset_names().join(", ")))
        })?;
        if self.is_set("grid_points") {
            let pts: Vec<usize> = self.list("grid_points")?;
            let pts = if pts.len() == 1 && g.grid.dim() == 2 { vec![pts[0]; 2] } else { pts };
            g.grid = GridSpec::new(&pts, &g.grid.lo, &g.grid.hi, g.grid.periodic, g.grid.fields).map_err(|e| usage(e.to_string()))?;
        }
        if let Some(v) = self.optional("t_end")? {
            g.t_end = v;
        }
        if let Some(v) = self.optional("dt")? {
            g.dt = v;
        }
        if let Some(v) = self.optional("save_every")? {
            g.save_every = v;
        }
        if let Some(v) = self.optional("n_train")? {
            g.n_train = v;
        }
        if let Some(v) = self.optional("n_val")? {
            g.n_val = v;
        }
        if let Some(v) = self.optional("n_test")? {
            g.n_test = v;
        }
        if let Some(v) = self.optional("noise_sigma")? {
            g.noise_sigma = v;
        }
        if self.is_set("eval_horizon") {
            g.eval_horizon = self.horizon()?;
        }
        g.seed = match self.optional("data_seed")? {
            Some(s) => s,
            None => self.seed()?,
        };
        Ok(g)
    }

    fn horizon(&self) -> Result<Option<f64>, CliError> {
        if self.get("eval_horizon") == "none" {
            return Ok(None);
        }
        let h: f64 = self.parsed("eval_horizon")?;
        if !(h > 0.0) {
            return Err(usage("eval_horizon must be positive or `none`"));
        }
        Ok(Some(h))
    }

    /// Time span over which validation and test errors are scored: the
    /// `eval_horizon` key if set, else the value recorded by the generator.
    pub fn eval_horizon(&self, generator: &serde_json::Value) -> Result<Option<f64>, CliError> {
        if self.is_set("eval_horizon") {
            self.horizon()
        } else {
            Ok(generator.get("eval_horizon").and_then(serde_json::Value::as_f64))
        }
    }

    /// Model architecture for a dataset on `grid` with noise level `noise_sigma`.
    pub fn model(&self, grid: &GridSpec, noise_sigma: f64) -> Result<ModelConfig, CliError> {
        let default_precision = if noise_sigma > 0.0 { 1.0 / (noise_sigma * noise_sigma) } else { 1e2 };
        let mut coarse: Vec<usize> = self.list("coarse")?;
        if coarse.len() == 1 && grid.dim() == 2 {
            coarse.push(coarse[0]);
        }
        Ok(ModelConfig {
            scale: ScaleConfig {
                grid: grid.clone(),
                coarse,
                kernel_factor: self.parsed("kernel_factor")?,
                micro_filters: self.list("micro_filters")?,
                micro_kernel: self.parsed("micro_kernel")?,
                init_sigma_z: self.parsed("init_sigma_z")?,
            },
            dynamics: DynamicsConfig {
                stencil_q: self.parsed("stencil_q")?,
                macro_hidden: self.list("macro_hidden")?,
                micro_hidden: self.list("micro_hidden")?,
                positional: self.parsed("positional")?,
                init_dispersion: self.parsed("init_dispersion")?,
                time_scale: self.parsed("time_scale")?,
            },
            init_precision: self.optional("init_precision")?.unwrap_or(default_precision),
        })
    }

    /// Training schedule; `epochs`, when set, overrides `steps_per_stage` with
    /// `epochs * ceil(segments / batch_size)`.
    pub fn train(&self, segments: usize, val_horizon: Option<f64>) -> Result<TrainConfig, CliError> {
        let batch_size: usize = self.parsed("batch_size")?;
        let mut steps: u64 = self.parsed("steps_per_stage")?;
        if let Some(epochs) = self.optional::<u64>("epochs")? {
            steps = epochs * segments.div_ceil(batch_size.max(1)) as u64;
        }
        Ok(TrainConfig {
            n_eta_target: self.parsed("n_eta")?,
            segment_len: self.parsed("segment_len")?,
            n_quad: self.parsed("n_quad")?,
            n_mc: self.parsed("n_mc")?,
            batch_size,
            steps_per_stage: steps,
            lr_first: self.parsed("lr_first")?,
            lr_next: self.parsed("lr_next")?,
            decay: self.parsed("decay")?,
            decay_every: self.parsed("decay_every")?,
            val_every: self.parsed("val_every")?,
            val_paths: self.parsed("val_paths")?,
            val_horizon,
            seed: self.seed()?,
        })
    }

    pub fn sindy_grid(&self) -> Result<(Vec<usize>, Vec<f64>), CliError> {
        let orders: Vec<usize> = self.list("sindy_orders")?;
        if orders.is_empty() || orders.iter().any(|o| !(1..=2).contains(o)) {
            return Err(usage("sindy_orders must list values in {1, 2}"));
        }
        let taus: Vec<f64> = self.list("sindy_thresholds")?;
        if taus.is_empty() {
            return Err(usage("sindy_thresholds must not be empty"));
        }
        Ok((orders, taus))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let c = Config::parse("# run\nbatch_size = 16\nlr_first=0.01 # fast\n\n").unwrap();
        assert_eq!(c.get("batch_size"), "16");
        assert_eq!(c.parsed::<f64>("lr_first").unwrap(), 0.01);
        assert!(matches!(Config::parse("bogus = 1"), Err(CliError::Usage(_))));
        assert!(Config::parse("batch_size 16").is_err());
        assert!(Config::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::defaults();
        c.set("coarse", "10").unwrap();
        assert_eq!(Config::parse(&c.snapshot()).unwrap(), c);
    }

    #[test]
    fn epochs_override_steps() {
        let c = Config::parse("epochs = 3\nbatch_size = 4").unwrap();
        assert_eq!(c.train(10, None).unwrap().steps_per_stage, 9);
    }

    #[test]
    fn generator_overrides() {
        let c = Config::parse("preset = advection\nnoise_sigma = 0\nseed = 9").unwrap();
        let g = c.generator().unwrap();
        assert_eq!((g.n_train, g.n_val, g.n_test), (20, 5, 5));
        assert_eq!(g.noise_sigma, 0.0);
        assert_eq!(g.seed, 9);
        assert_eq!(g.eval_horizon, Some(0.2));
        assert!(Config::parse("preset = nope").unwrap().generator().is_err());
    }

    #[test]
    fn horizon_defers_to_metadata() {
        let meta = serde_json::json!({ "eval_horizon": 0.2 });
        assert_eq!(Config::defaults().eval_horizon(&meta).unwrap(), Some(0.2));
        assert_eq!(Config::defaults().eval_horizon(&serde_json::json!({})).unwrap(), None);
        let none = Config::parse("eval_horizon = none").unwrap();
        assert_eq!(none.eval_horizon(&meta).unwrap(), None);
        assert_eq!(none.generator().unwrap().eval_horizon, None);
        assert!(Config::parse("eval_horizon = -1").unwrap().eval_horizon(&meta).is_err());
    }
}
