//! Checkpoint archive: one safetensors file.
//!
//! Tensor names carry a role prefix: `online/<param>`, `momentum/<param>`,
//! `optimizer/first/<param>`, `optimizer/second/<param>` and, for the frozen
//! generator variant, `frozen/<param>`. The header metadata holds `format`,
//! `version`, `config` (TOML echo of the effective run configuration), `step`,
//! `optimizer_steps` and, when known, `config_source` (the configuration text
//! as written, followed by its command-line overrides).

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;
use safetensors::SafeTensors;

use super::{RunConfig, TrainState};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TensorMap};

pub const CHECKPOINT_FORMAT: &str = "rasa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// The configuration text exactly as stored.
    pub config_text: String,
    pub config_source: Option<String>,
    pub step: u64,
    pub optimizer_steps: u64,
    pub online: TensorMap,
    pub momentum: TensorMap,
    pub optimizer: TensorMap,
    pub frozen: Option<TensorMap>,
}

impl Checkpoint {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let spec = &self.config.corpus;
        let vocab = Vocab::for_attributes(spec.n_attributes, spec.attribute_vocab_size)?;
        ModelConfig::for_corpus(self.config.model.clone(), spec, &vocab)
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let mut tensors = TensorMap::new();
    for (k, v) in state.params.snapshot()? {
        tensors.insert(format!("online/{k}"), v);
    }
    for (k, v) in state.momentum.params()? {
        tensors.insert(format!("momentum/{k}"), v.clone());
    }
    for (k, v) in state.optimizer.state_tensors() {
        tensors.insert(format!("optimizer/{k}"), v);
    }
    if let Some(frozen) = &state.frozen {
        for (k, v) in frozen {
            tensors.insert(format!("frozen/{k}"), v.clone());
        }
    }
    let mut meta = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("config".to_string(), state.config.to_toml()?),
        ("step".to_string(), state.step.to_string()),
        ("optimizer_steps".to_string(), state.optimizer.steps().to_string()),
    ]);
    if let Some(source) = &state.config_source {
        meta.insert("config_source".to_string(), source.clone());
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    safetensors::serialize_to_file(tensors.iter(), Some(meta), path)
        .map_err(|e| Error::Data(format!("writing checkpoint {}: {e}", path.display())))
}

fn split_prefix(all: &HashMap<String, candle_core::Tensor>, prefix: &str) -> TensorMap {
    all.iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: String| Error::Data(format!("checkpoint {}: {msg}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| bad("no metadata".into()))?;
    let get = |key: &str| meta.get(key).cloned().ok_or_else(|| bad(format!("missing metadata key {key}")));
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(bad("not a checkpoint of this format".into()));
    }
    let version: u32 = get("version")?.parse().map_err(|_| bad("bad version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let config_text = get("config")?;
    let config = RunConfig::parse(&config_text, &[])?;
    let step = get("step")?.parse().map_err(|_| bad("bad step".into()))?;
    let optimizer_steps = get("optimizer_steps")?.parse().map_err(|_| bad("bad optimizer_steps".into()))?;
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let frozen = split_prefix(&all, "frozen/");
    Ok(Checkpoint {
        config,
        config_text,
        config_source: meta.get("config_source").cloned(),
        step,
        optimizer_steps,
        online: split_prefix(&all, "online/"),
        momentum: split_prefix(&all, "momentum/"),
        optimizer: split_prefix(&all, "optimizer/"),
        frozen: (!frozen.is_empty()).then_some(frozen),
    })
}
