use candle_core::{Tensor, D};

use super::params::ParamSource;
use crate::error::Result;

/// Additive attention bias for masked keys.
pub const MASKED_LOGIT: f64 = -1e9;

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `x @ weight + bias`, with `weight` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn load(src: &impl ParamSource, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: src.tensor(&format!("{prefix}.weight"))?,
            bias: src.tensor(&format!("{prefix}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap();
        let rows = x.elem_count() / d_in;
        let y = x
            .reshape((rows, d_in))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    const EPS: f64 = 1e-5;

    pub fn load(src: &impl ParamSource, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: src.tensor(&format!("{prefix}.gamma"))?,
            beta: src.tensor(&format!("{prefix}.beta"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head attention; queries from one sequence, keys and values from another.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn load(src: &impl ParamSource, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::load(src, &format!("{prefix}.q"))?,
            k: Linear::load(src, &format!("{prefix}.k"))?,
            v: Linear::load(src, &format!("{prefix}.v"))?,
            o: Linear::load(src, &format!("{prefix}.o"))?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, h) = x.dims3()?;
        Ok(x.reshape((b, l, self.heads, h / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// `key_bias` is broadcastable to `[B, heads, Lq, Lk]` and added to the logits.
    pub fn forward(&self, query: &Tensor, context: &Tensor, key_bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, h) = query.dims3()?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / ((h / self.heads) as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = key_bias {
            logits = logits.broadcast_add(bias)?;
        }
        let attn = softmax_last(&logits)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, h))?;
        self.o.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer block. Fusion blocks add text-to-image cross-attention
/// between self-attention and the feed-forward layer.
#[derive(Debug, Clone)]
pub struct Block {
    ln_attn: LayerNorm,
    attn: Attention,
    cross: Option<(LayerNorm, Attention)>,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn load(src: &impl ParamSource, prefix: &str, heads: usize, cross: bool) -> Result<Self> {
        let cross = if cross {
            Some((
                LayerNorm::load(src, &format!("{prefix}.ln_cross"))?,
                Attention::load(src, &format!("{prefix}.cross"), heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            ln_attn: LayerNorm::load(src, &format!("{prefix}.ln_attn"))?,
            attn: Attention::load(src, &format!("{prefix}.attn"), heads)?,
            cross,
            ln_mlp: LayerNorm::load(src, &format!("{prefix}.ln_mlp"))?,
            mlp: Mlp {
                fc1: Linear::load(src, &format!("{prefix}.mlp.fc1"))?,
                fc2: Linear::load(src, &format!("{prefix}.mlp.fc2"))?,
            },
        })
    }

    pub fn forward(&self, x: &Tensor, key_bias: Option<&Tensor>, context: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let mut x = (x + self.attn.forward(&h, &h, key_bias)?)?;
        if let (Some((ln, cross)), Some(ctx)) = (&self.cross, context) {
            let h = ln.forward(&x)?;
            x = (&x + cross.forward(&h, ctx, None)?)?;
        }
        let h = self.ln_mlp.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}
