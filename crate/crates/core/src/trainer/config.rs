use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, PositiveMode, Vocab};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{Architecture, ModelConfig};
use crate::objectives::{LossWeights, NegativeSampling, ReplacementGenerator};

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training texts.
    pub steps_per_epoch: usize,
    /// Hard cap on total steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// EMA coefficient of the momentum model.
    pub momentum: f64,
    pub queue_size: usize,
    pub temperature: f64,
    pub temperature_min: f64,
    pub temperature_max: f64,
    /// Probability of a weak positive under probabilistic sampling.
    pub p_weak: f64,
    pub p_mask: f64,
    pub lambda_prd: f64,
    pub lambda_rtd: f64,
    pub lambda_cl: f64,
    pub positive_mode: PositiveMode,
    pub negative_sampling: NegativeSampling,
    pub exclude_same_identity: bool,
    pub rtd_generator: ReplacementGenerator,
    /// Step at which the frozen generator snapshot is taken.
    pub frozen_generator_step: usize,
    pub enable_itm: bool,
    pub enable_prd: bool,
    pub enable_mlm: bool,
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 0,
            max_steps: 0,
            batch_size: 32,
            lr_heads: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.995,
            queue_size: 1024,
            temperature: 0.07,
            temperature_min: 1e-3,
            temperature_max: 0.5,
            p_weak: 0.1,
            p_mask: 0.3,
            lambda_prd: 0.5,
            lambda_rtd: 0.5,
            lambda_cl: 0.5,
            positive_mode: PositiveMode::Probabilistic,
            negative_sampling: NegativeSampling::Hard,
            exclude_same_identity: true,
            rtd_generator: ReplacementGenerator::Momentum,
            frozen_generator_step: 0,
            enable_itm: true,
            enable_prd: true,
            enable_mlm: true,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

fn unit_interval(key: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("train.{key} must be in [0, 1], got {v}")))
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("train.{key} must be positive, got {v}")))
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("train.{key} must be non-negative, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("train.batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.queue_size == 0 {
            return Err(Error::Config("train.queue_size must be >= 1".into()));
        }
        positive("lr_heads", self.lr_heads)?;
        positive("lr_backbone", self.lr_backbone)?;
        positive("adam_eps", self.adam_eps)?;
        positive("temperature", self.temperature)?;
        positive("temperature_min", self.temperature_min)?;
        non_negative("weight_decay", self.weight_decay)?;
        non_negative("lambda_prd", self.lambda_prd)?;
        non_negative("lambda_rtd", self.lambda_rtd)?;
        non_negative("lambda_cl", self.lambda_cl)?;
        unit_interval("momentum", self.momentum)?;
        unit_interval("p_weak", self.p_weak)?;
        unit_interval("adam_beta1", self.adam_beta1)?;
        unit_interval("adam_beta2", self.adam_beta2)?;
        if !(self.p_mask > 0.0 && self.p_mask < 1.0) {
            return Err(Error::Config(format!("train.p_mask must be in (0, 1), got {}", self.p_mask)));
        }
        if !(self.temperature_min < self.temperature_max) {
            return Err(Error::Config("train.temperature_min must be below train.temperature_max".into()));
        }
        if !(self.temperature_min..=self.temperature_max).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "train.temperature {} outside [{}, {}]",
                self.temperature, self.temperature_min, self.temperature_max
            )));
        }
        if self.rtd_generator != ReplacementGenerator::Off && !self.enable_mlm {
            return Err(Error::Config(
                "train.rtd_generator needs train.enable_mlm: replacements are sampled at masked positions".into(),
            ));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            prd: self.lambda_prd,
            rtd: self.lambda_rtd,
            cl: self.lambda_cl,
        }
    }
}

/// Output locations; relative paths resolve against the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: String,
    pub run: String,
    /// Checkpoint read by `eval` and `embed`; empty means `<run>/final.safetensors`.
    pub checkpoint: String,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            run: "run".into(),
            checkpoint: String::new(),
        }
    }
}

/// The whole declarative run configuration, one section per module.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: Architecture,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    /// Parses TOML text, applies `section.key=value` overrides and validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let inner: toml::de::Error = e.into_inner();
            Error::Config(format!("{path}: {}", inner.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let vocab = Vocab::for_attributes(self.corpus.n_attributes, self.corpus.attribute_vocab_size)?;
        ModelConfig::for_corpus(self.model.clone(), &self.corpus, &vocab).map(|_| ())
    }

    /// Canonical TOML echo of the effective configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short content hash identifying the effective configuration.
    pub fn fingerprint(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes()))[..16].to_string())
    }
}

/// Sets `section.key` to `value`, parsed as a TOML literal when possible and as a string otherwise.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let path = path.trim();
    let keys: Vec<&str> = path.split('.').collect();
    if keys.len() != 2 || keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` must be section.key")));
    }
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let table = root
        .as_table_mut()
        .ok_or_else(|| Error::Config("configuration root must be a table".into()))?;
    let section = table
        .entry(keys[0])
        .or_insert_with(|| toml::Value::Table(Default::default()))
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{}` is not a section", keys[0])))?;
    section.insert(keys[1].to_string(), parsed);
    Ok(())
}
