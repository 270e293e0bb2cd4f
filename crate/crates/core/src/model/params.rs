use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};

/// Named tensors without gradient tracking (momentum weights, snapshots).
pub type TensorMap = BTreeMap<String, Tensor>;

/// Anything that can hand out a parameter tensor by name.
pub trait ParamSource {
    fn tensor(&self, name: &str) -> Result<Tensor>;
}

impl ParamSource for TensorMap {
    fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Dimension(format!("missing parameter {name}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub const TEMPERATURE: &str = "temp";
pub const HEAD_PREFIX: &str = "heads.";

fn push(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    push(out, format!("{prefix}.weight"), vec![d_in, d_out], Init::Normal);
    push(out, format!("{prefix}.bias"), vec![d_out], Init::Zeros);
}

fn layer_norm(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    push(out, format!("{prefix}.gamma"), vec![dim], Init::Ones);
    push(out, format!("{prefix}.beta"), vec![dim], Init::Zeros);
}

fn attention(out: &mut Vec<ParamSpec>, prefix: &str, h: usize) {
    for p in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.{p}"), h, h);
    }
}

fn block(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig, cross: bool) {
    let h = cfg.arch.hidden_dim;
    layer_norm(out, &format!("{prefix}.ln_attn"), h);
    attention(out, &format!("{prefix}.attn"), h);
    if cross {
        layer_norm(out, &format!("{prefix}.ln_cross"), h);
        attention(out, &format!("{prefix}.cross"), h);
    }
    layer_norm(out, &format!("{prefix}.ln_mlp"), h);
    linear(out, &format!("{prefix}.mlp.fc1"), h, cfg.mlp_dim());
    linear(out, &format!("{prefix}.mlp.fc2"), cfg.mlp_dim(), h);
}

/// Every parameter of the model with its shape and initializer.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let h = cfg.arch.hidden_dim;
    let mut out = Vec::new();
    linear(&mut out, "image.patch", cfg.patch_side * cfg.patch_side, h);
    push(&mut out, "image.cls".into(), vec![1, h], Init::Normal);
    push(&mut out, "image.pos".into(), vec![cfg.n_patches() + 1, h], Init::Normal);
    for i in 0..cfg.arch.image_layers {
        block(&mut out, &format!("image.blocks.{i}"), cfg, false);
    }
    layer_norm(&mut out, "image.ln", h);

    push(&mut out, "text.tok".into(), vec![cfg.vocab_size, h], Init::Normal);
    push(&mut out, "text.pos".into(), vec![cfg.max_len, h], Init::Normal);
    for i in 0..cfg.arch.text_layers {
        block(&mut out, &format!("text.blocks.{i}"), cfg, false);
    }
    layer_norm(&mut out, "text.ln", h);

    for i in 0..cfg.arch.cross_layers {
        block(&mut out, &format!("fusion.blocks.{i}"), cfg, true);
    }
    layer_norm(&mut out, "fusion.ln", h);

    linear(&mut out, "proj.image", h, cfg.arch.proj_dim);
    linear(&mut out, "proj.text", h, cfg.arch.proj_dim);

    linear(&mut out, "heads.itm", h, 2);
    linear(&mut out, "heads.prd", h, 2);
    linear(&mut out, "heads.mlm", h, cfg.vocab_size);
    linear(&mut out, "heads.rtd", h, 2);

    push(&mut out, TEMPERATURE.into(), vec![1], Init::Constant(0.07));
    out
}

pub fn is_head(name: &str) -> bool {
    name.starts_with(HEAD_PREFIX)
}

/// Parameters excluded from weight decay: biases, layer-norm affines and the temperature.
pub fn is_decay_exempt(name: &str) -> bool {
    name == TEMPERATURE || name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Trainable parameters of the online model.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    /// Random init: N(0, init_std) weights and embeddings, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, dtype: DType, device: &Device, seed: u64, temperature: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.arch.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut vars = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n: usize = spec.shape.iter().product();
            let values: Vec<f64> = match spec.init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Constant(_) if spec.name == TEMPERATURE => vec![temperature; n],
                Init::Constant(c) => vec![c; n],
            };
            let t = Tensor::from_vec(values, spec.shape.as_slice(), device)?.to_dtype(dtype)?;
            vars.insert(spec.name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars,
            dtype,
            device: device.clone(),
        })
    }

    /// Rebuilds a store from named tensors (e.g. a checkpoint), checking names and shapes.
    pub fn from_tensors(cfg: &ModelConfig, tensors: &TensorMap, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        let mut device = Device::Cpu;
        for spec in param_specs(cfg) {
            let t = tensors.tensor(&spec.name)?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
            device = t.device().clone();
            vars.insert(spec.name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self { vars, dtype, device })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy of the current values, detached from the graph.
    pub fn snapshot(&self) -> Result<TensorMap> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites values in place from `tensors`.
    pub fn assign(&self, tensors: &TensorMap) -> Result<()> {
        for (name, var) in &self.vars {
            let t = tensors.tensor(name)?;
            if t.dims() != var.dims() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

impl ParamSource for ParamStore {
    fn tensor(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::Dimension(format!("missing parameter {name}")))
    }
}
