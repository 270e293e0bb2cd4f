use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::{is_decay_exempt, is_head, ParamStore, TensorMap, TEMPERATURE};

/// Parameter group of a named parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Heads,
    Backbone,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if is_head(name) {
            ParamGroup::Heads
        } else {
            ParamGroup::Backbone
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Heads => self.lr_heads,
            ParamGroup::Backbone => self.lr_backbone,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Adam with decoupled weight decay and two learning-rate groups.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let correct1 = 1.0 - c.beta1.powi(t);
        let correct2 = 1.0 - c.beta2.powi(t);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients keep the step's graph alive through their op history.
            let g = g.detach();
            let lr = c.lr(ParamGroup::of(name));
            let mom = match self.moments.get(name) {
                Some(m) => m.clone(),
                None => Moments {
                    first: g.zeros_like()?,
                    second: g.zeros_like()?,
                },
            };
            let first = (mom.first.affine(c.beta1, 0.0)? + g.affine(1.0 - c.beta1, 0.0)?)?;
            let second = (mom.second.affine(c.beta2, 0.0)? + g.sqr()?.affine(1.0 - c.beta2, 0.0)?)?;
            let denom = second.affine(1.0 / correct2, 0.0)?.sqrt()?.affine(1.0, c.eps)?;
            let update = first.affine(1.0 / correct1, 0.0)?.div(&denom)?;
            let decay = if is_decay_exempt(name) { 0.0 } else { lr * c.weight_decay };
            let theta = var.as_tensor().detach();
            let next = (theta.affine(1.0 - decay, 0.0)? - update.affine(lr, 0.0)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), Moments { first, second });
        }
        Ok(())
    }

    /// Moment estimates as `first/<name>` and `second/<name>`.
    pub fn state_tensors(&self) -> TensorMap {
        let mut out = TensorMap::new();
        for (name, m) in &self.moments {
            out.insert(format!("first/{name}"), m.first.clone());
            out.insert(format!("second/{name}"), m.second.clone());
        }
        out
    }

    pub fn load_state(&mut self, steps: u64, tensors: &TensorMap) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (key, first) in tensors {
            if let Some(name) = key.strip_prefix("first/") {
                let second = tensors
                    .get(&format!("second/{name}"))
                    .ok_or_else(|| Error::Data(format!("optimizer state lacks second moment of {name}")))?;
                moments.insert(
                    name.to_string(),
                    Moments {
                        first: first.clone(),
                        second: second.clone(),
                    },
                );
            }
        }
        self.moments = moments;
        self.steps = steps;
        Ok(())
    }
}

/// Clamps the temperature parameter in place; returns the clamped value.
pub fn clamp_temperature(params: &ParamStore, min: f64, max: f64) -> Result<f64> {
    let var = params
        .get(TEMPERATURE)
        .ok_or_else(|| Error::Dimension("missing temperature parameter".into()))?;
    let clamped = var.as_tensor().detach().clamp(min, max)?;
    var.set(&clamped)?;
    Ok(clamped.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}
