use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSpec, Vocab};
use crate::error::{Error, Result};

/// Layer counts and widths, independent of the data the model is bound to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub image_layers: usize,
    pub text_layers: usize,
    pub cross_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// Width of the feed-forward layer as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    /// Standard deviation of the normal init for weight matrices and embeddings.
    pub init_std: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            image_layers: 4,
            text_layers: 2,
            cross_layers: 2,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            proj_dim: 32,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub image_side: usize,
    pub patch_side: usize,
    pub vocab_size: usize,
    /// Text length including the leading `[CLS]`.
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(arch: Architecture, image_side: usize, patch_side: usize, vocab_size: usize, max_len: usize) -> Result<Self> {
        let cfg = Self {
            arch,
            image_side,
            patch_side,
            vocab_size,
            max_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_corpus(arch: Architecture, spec: &CorpusSpec, vocab: &Vocab) -> Result<Self> {
        Self::new(arch, spec.image_side, spec.patch_side, vocab.len(), spec.max_len)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.hidden_dim == 0 || a.heads == 0 || a.hidden_dim % a.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden_dim ({}) must be divisible by model.heads ({})",
                a.hidden_dim, a.heads
            )));
        }
        if a.cross_layers < 1 {
            return Err(Error::Config("model.cross_layers must be >= 1".into()));
        }
        if a.proj_dim == 0 || a.proj_dim > a.hidden_dim {
            return Err(Error::Config(format!(
                "model.proj_dim ({}) must be in 1..=hidden_dim ({})",
                a.proj_dim, a.hidden_dim
            )));
        }
        if a.mlp_ratio == 0 {
            return Err(Error::Config("model.mlp_ratio must be >= 1".into()));
        }
        if !(a.init_std > 0.0 && a.init_std.is_finite()) {
            return Err(Error::Config("model.init_std must be positive".into()));
        }
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config("image_side must be a multiple of patch_side".into()));
        }
        if self.vocab_size <= Vocab::N_SPECIAL as usize {
            return Err(Error::Config("vocab_size must exceed the reserved tokens".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn head_dim(&self) -> usize {
        self.arch.hidden_dim / self.arch.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.arch.hidden_dim * self.arch.mlp_ratio
    }
}
