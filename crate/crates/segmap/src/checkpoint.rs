//! Checkpoints in the safetensors container.
//!
//! Every array is stored as little-endian `F32` with its explicit shape:
//! `param.<name>` for model parameters, `adam.m.<name>` and `adam.v.<name>`
//! for the optimizer moments. String metadata holds `format_version`,
//! `config` (JSON), `step`, `epoch`, `adam_t`, `param_order` (JSON list of
//! parameter names) and `history` (JSON list of step records).

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use segmap_core::model::Model;
use segmap_core::train::{StepRecord, Trainer};
use segmap_core::{Config, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    /// Completed optimizer steps.
    pub step: usize,
    pub epoch: usize,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor<f32>>,
    pub adam_v: Vec<Tensor<f32>>,
    pub history: Vec<StepRecord>,
}

fn le_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer<f32>, epoch: usize) -> Self {
        let store = &t.model.store;
        Self {
            config: t.model.cfg.clone(),
            step: t.step,
            epoch,
            params: store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect(),
            adam_t: t.opt.t,
            adam_m: t.opt.m.clone(),
            adam_v: t.opt.v.clone(),
            history: t.history.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (i, (name, p)) in self.params.iter().enumerate() {
            named.push((format!("param.{name}"), p.shape().to_vec(), le_bytes(p)));
            named.push((format!("adam.m.{name}"), p.shape().to_vec(), le_bytes(&self.adam_m[i])));
            named.push((format!("adam.v.{name}"), p.shape().to_vec(), le_bytes(&self.adam_v[i])));
        }
        let views: Vec<(String, TensorView<'_>)> = named
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).expect("consistent view")))
            .collect();
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config).expect("config serializes"));
        meta.insert("step".to_string(), self.step.to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("adam_t".to_string(), self.adam_t.to_string());
        meta.insert("history".to_string(), serde_json::to_string(&self.history).expect("history serializes"));
        meta.insert(
            "param_order".to_string(),
            serde_json::to_string(&self.params.iter().map(|(n, _)| n).collect::<Vec<_>>()).expect("names serialize"),
        );
        safetensors::serialize(views, &Some(meta)).expect("in-memory serialization")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(format!("not a checkpoint: {e}")))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(format!("not a checkpoint: {e}")))?;
        let md = meta.metadata().clone().unwrap_or_default();
        let get = |k: &str| md.get(k).ok_or_else(|| bad(format!("missing metadata `{k}`")));
        if get("format_version")? != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", get("format_version")?)));
        }
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("metadata `{k}` is not an integer"))) };
        let config: Config = serde_json::from_str(get("config")?).map_err(|e| bad(format!("config: {e}")))?;
        let history: Vec<StepRecord> = serde_json::from_str(get("history")?).map_err(|e| bad(format!("history: {e}")))?;
        let order: Vec<String> = serde_json::from_str(get("param_order")?).map_err(|e| bad(format!("param_order: {e}")))?;
        let read = |name: &str| -> Result<Tensor<f32>> {
            let v = st.tensor(name).map_err(|_| bad(format!("missing array `{name}`")))?;
            if v.dtype() != Dtype::F32 {
                return Err(bad(format!("array `{name}` has dtype {:?}, expected F32", v.dtype())));
            }
            let data = v
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(v.shape(), data).map_err(|e| bad(format!("array `{name}`: {e}")))
        };
        let mut params = Vec::with_capacity(order.len());
        let mut adam_m = Vec::with_capacity(order.len());
        let mut adam_v = Vec::with_capacity(order.len());
        for n in &order {
            params.push((n.clone(), read(&format!("param.{n}"))?));
            adam_m.push(read(&format!("adam.m.{n}"))?);
            adam_v.push(read(&format!("adam.v.{n}"))?);
        }
        Ok(Self {
            config,
            step: num("step")? as usize,
            epoch: num("epoch")? as usize,
            params,
            adam_t: num("adam_t")?,
            adam_m,
            adam_v,
            history,
        })
    }

    /// Copies the parameters into `model`; every missing, unexpected or
    /// differently shaped array is listed in the error.
    pub fn load_weights(&self, model: &mut Model<f32>) -> Result<()> {
        model.store.load_from(&self.params).map_err(|e| match e {
            segmap_core::Error::Shape(msg) => Error::Incompatible(msg),
            other => Error::Core(other),
        })
    }

    /// Copies every saved parameter whose name and shape match one of
    /// `model`'s into it, leaving the rest at their initial values. Returns
    /// the names of the model parameters that were not loaded.
    pub fn warm_start(&self, model: &mut Model<f32>) -> Vec<String> {
        let saved: HashMap<&str, &Tensor<f32>> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        let mut missed = Vec::new();
        for name in names {
            let slot = model.store.by_name_mut(&name).expect("name from the same store");
            match saved.get(name.as_str()) {
                Some(t) if t.shape() == slot.shape() => *slot = (*t).clone(),
                _ => missed.push(name),
            }
        }
        missed
    }

    /// Rebuilds the trainer exactly as it was when saved.
    pub fn into_trainer(self) -> Result<Trainer<f32>> {
        let mut t = Trainer::new(&self.config)?;
        self.load_weights(&mut t.model)?;
        // Moments are stored in the same name order as the parameters.
        let by_name: HashMap<&str, usize> = self.params.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
        let mut m = Vec::with_capacity(by_name.len());
        let mut v = Vec::with_capacity(by_name.len());
        for (name, _) in t.model.store.iter() {
            let i = by_name[name];
            m.push(self.adam_m[i].clone());
            v.push(self.adam_v[i].clone());
        }
        t.opt.restore(self.adam_t, m, v, &t.model.store)?;
        t.step = self.step;
        t.history = self.history;
        Ok(t)
    }
}
