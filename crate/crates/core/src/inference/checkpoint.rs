use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compute::{ParamSpec, ParamStore, Tensor};
use crate::dynamics::{DynamicsConfig, SdeModel};
use crate::likelihood::PoeParams;
use crate::scales::{ScaleConfig, ScaleOps};
use crate::{invalid, Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Architecture settings; together with `n_eta` they fix every parameter shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: ScaleConfig,
    pub dynamics: DynamicsConfig,
    /// Initial value of both expert precisions.
    pub init_precision: f64,
}

impl ModelConfig {
    pub fn build(&self, n_eta: usize) -> Result<SdeModel> {
        SdeModel::new(ScaleOps::new(self.scale.clone(), n_eta)?, self.dynamics.clone())
    }

    /// Every parameter of the model at its `n_eta`, precisions included.
    pub fn param_specs(&self, model: &SdeModel) -> Vec<ParamSpec> {
        let mut specs = model.all_param_specs();
        specs.extend(PoeParams::param_specs(model.scales.n_y(), self.init_precision));
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub n_eta: usize,
    pub stage: usize,
    pub step: u64,
    pub val_eps: Option<f64>,
    /// Resolved run configuration, stored verbatim.
    pub meta: serde_json::Value,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    n_eta: usize,
    stage: usize,
    step: u64,
    val_eps: Option<f64>,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn instantiate(&self) -> Result<SdeModel> {
        let model = self.model.build(self.n_eta)?;
        for spec in self.model.param_specs(&model) {
            match self.params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape(self.n_eta).as_slice() => {}
                _ => return invalid(format!("checkpoint parameter {} is missing or has the wrong shape", spec.name)),
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            n_eta: self.n_eta,
            stage: self.stage,
            step: self.step,
            val_eps: self.val_eps,
            meta: self.meta.clone(),
            tensors: self.params.iter().map(|(n, t)| TensorHeader { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.params.num_values());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
        let mut pos = 16 + len;
        let mut params = ParamStore::new();
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| corrupt(format!("truncated tensor {}", th.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(th.name, Tensor::new(&th.shape, data)?);
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            model: header.model,
            n_eta: header.n_eta,
            stage: header.stage,
            step: header.step,
            val_eps: header.val_eps,
            meta: header.meta,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        f.write_all(&bytes).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
