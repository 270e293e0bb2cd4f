//! The online network: image encoder, text encoder, text-guided cross-modal
//! encoder, projection heads and the four task classifiers.
//!
//! Shapes: images `[B, S, S]`, tokens `[B, L]` (L = max_len, position 0 is
//! `[CLS]`). Visual sequences are `[B, M + 1, H]`, textual and fused sequences
//! `[B, L, H]`. The fused sequence always has the text's length: text is the
//! query side of cross-attention, image tokens are keys and values.

mod config;
mod layers;
mod params;

use candle_core::{DType, Device, IndexOp, Tensor, D};

pub use config::{Architecture, ModelConfig};
pub use layers::{Attention, Block, LayerNorm, Linear, MASKED_LOGIT};
pub(crate) use layers::{log_softmax_last, softmax_last};
pub use params::{
    is_decay_exempt, is_head, param_specs, Init, ParamSource, ParamSpec, ParamStore, TensorMap, HEAD_PREFIX,
    TEMPERATURE,
};

use crate::corpus::Vocab;
use crate::error::{Error, Result};

/// Token ids with their key-padding bias, ready for the text encoder.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// `[B, L]` u32.
    pub ids: Tensor,
    /// `[B, 1, 1, L]`: 0 on real tokens, [`MASKED_LOGIT`] on padding.
    pub key_bias: Tensor,
    pub host: Vec<Vec<u32>>,
}

impl TokenBatch {
    pub fn new<T: AsRef<[u32]>>(rows: &[T], cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("empty token batch".into()));
        }
        let mut flat = Vec::with_capacity(rows.len() * cfg.max_len);
        let mut bias = Vec::with_capacity(rows.len() * cfg.max_len);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cfg.max_len {
                return Err(Error::Dimension(format!(
                    "token sequence has length {}, expected max_len {}",
                    row.len(),
                    cfg.max_len
                )));
            }
            for &t in row {
                if t as usize >= cfg.vocab_size {
                    return Err(Error::Vocabulary(format!(
                        "token id {t} out of range for vocab_size {}",
                        cfg.vocab_size
                    )));
                }
                flat.push(t);
                bias.push(if t == Vocab::PAD_ID { MASKED_LOGIT } else { 0.0 });
            }
        }
        let b = rows.len();
        Ok(Self {
            ids: Tensor::from_vec(flat, (b, cfg.max_len), device)?,
            key_bias: Tensor::from_vec(bias, (b, 1, 1, cfg.max_len), device)?.to_dtype(dtype)?,
            host: rows.iter().map(|r| r.as_ref().to_vec()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.host.len()
    }

    pub fn is_empty(&self) -> bool {
        self.host.is_empty()
    }
}

/// Stacks images into a `[B, S, S]` tensor after checking shape and finiteness.
pub fn pixel_batch<T: AsRef<[f32]>>(images: &[T], cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Tensor> {
    let per = cfg.image_side * cfg.image_side;
    let mut flat = Vec::with_capacity(images.len() * per);
    for img in images {
        let img = img.as_ref();
        if img.len() != per {
            return Err(Error::Dimension(format!(
                "image has {} pixels, expected {}x{}",
                img.len(),
                cfg.image_side,
                cfg.image_side
            )));
        }
        if img.iter().any(|p| !p.is_finite()) {
            return Err(Error::numeric("pixels", "non-finite pixel value"));
        }
        flat.extend_from_slice(img);
    }
    if images.is_empty() {
        return Err(Error::Dimension("empty image batch".into()));
    }
    Ok(Tensor::from_vec(flat, (images.len(), cfg.image_side, cfg.image_side), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Image,
    Text,
}

/// Per-pair outputs of one forward pass through the unimodal encoders and the fusion encoder.
#[derive(Debug, Clone)]
pub struct RepresentationBundle {
    /// `[B, M + 1, H]`: `v_cls` then patch representations.
    pub visual: Tensor,
    /// `[B, L, H]`: `t_cls` then token representations.
    pub textual: Tensor,
    /// `[B, L, H]`: `f_cls` then per-token joint representations.
    pub fused: Tensor,
    /// `[B, P]`, unit norm.
    pub image_proj: Tensor,
    /// `[B, P]`, unit norm.
    pub text_proj: Tensor,
}

#[derive(Debug, Clone)]
struct ImageEncoder {
    patch: Linear,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

#[derive(Debug, Clone)]
struct TextEncoder {
    tok: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
}

#[derive(Debug, Clone)]
struct Heads {
    itm: Linear,
    prd: Linear,
    mlm: Linear,
    rtd: Linear,
}

/// A model instance bound to one set of parameter tensors.
///
/// Built from a [`ParamStore`] the forward pass is differentiable w.r.t. the
/// store's variables; built from a [`TensorMap`] (momentum weights, frozen
/// snapshots) it is a constant function of its inputs.
#[derive(Debug, Clone)]
pub struct RasaModel {
    config: ModelConfig,
    image: ImageEncoder,
    text: TextEncoder,
    fusion: Vec<Block>,
    fusion_ln: LayerNorm,
    image_proj: Linear,
    text_proj: Linear,
    heads: Heads,
    temp: Tensor,
}

impl RasaModel {
    pub fn from_source(config: &ModelConfig, src: &impl ParamSource) -> Result<Self> {
        let heads = config.arch.heads;
        let blocks = |prefix: &str, n: usize, cross: bool| -> Result<Vec<Block>> {
            (0..n).map(|i| Block::load(src, &format!("{prefix}.{i}"), heads, cross)).collect()
        };
        Ok(Self {
            config: config.clone(),
            image: ImageEncoder {
                patch: Linear::load(src, "image.patch")?,
                cls: src.tensor("image.cls")?,
                pos: src.tensor("image.pos")?,
                blocks: blocks("image.blocks", config.arch.image_layers, false)?,
                ln: LayerNorm::load(src, "image.ln")?,
            },
            text: TextEncoder {
                tok: src.tensor("text.tok")?,
                pos: src.tensor("text.pos")?,
                blocks: blocks("text.blocks", config.arch.text_layers, false)?,
                ln: LayerNorm::load(src, "text.ln")?,
            },
            fusion: blocks("fusion.blocks", config.arch.cross_layers, true)?,
            fusion_ln: LayerNorm::load(src, "fusion.ln")?,
            image_proj: Linear::load(src, "proj.image")?,
            text_proj: Linear::load(src, "proj.text")?,
            heads: Heads {
                itm: Linear::load(src, "heads.itm")?,
                prd: Linear::load(src, "heads.prd")?,
                mlm: Linear::load(src, "heads.mlm")?,
                rtd: Linear::load(src, "heads.rtd")?,
            },
            temp: src.tensor(TEMPERATURE)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Learnable contrastive temperature, shape `[1]`.
    pub fn temperature(&self) -> &Tensor {
        &self.temp
    }

    pub fn dtype(&self) -> DType {
        self.temp.dtype()
    }

    pub fn device(&self) -> &Device {
        self.temp.device()
    }

    /// Flattens `[B, S, S]` pixels into `[B, M, p*p]` patches in row-major grid order.
    pub fn patchify(&self, pixels: &Tensor) -> Result<Tensor> {
        let (b, h, w) = pixels.dims3().map_err(|_| {
            Error::Dimension(format!("pixels must be [B, S, S], got {:?}", pixels.dims()))
        })?;
        let (s, p) = (self.config.image_side, self.config.patch_side);
        if h != s || w != s {
            return Err(Error::Dimension(format!("image is {h}x{w}, expected {s}x{s}")));
        }
        let g = s / p;
        Ok(pixels
            .reshape((b, g, p, g, p))?
            .permute((0, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, g * g, p * p))?)
    }

    /// Linear patch embeddings before the `[CLS]` token and positions are added, `[B, M, H]`.
    pub fn patch_embeddings(&self, pixels: &Tensor) -> Result<Tensor> {
        self.image.patch.forward(&self.patchify(pixels)?)
    }

    /// `[B, S, S]` pixels to the visual sequence `[B, M + 1, H]`.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<Tensor> {
        let patches = self.patch_embeddings(pixels)?;
        let (b, _, h) = patches.dims3()?;
        let cls = self.image.cls.reshape((1, 1, h))?.broadcast_as((b, 1, h))?;
        let mut x = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(&self.image.pos)?;
        for block in &self.image.blocks {
            x = block.forward(&x, None, None)?;
        }
        self.image.ln.forward(&x)
    }

    /// Token ids to the textual sequence `[B, L, H]`. Padding keys are masked in every layer.
    pub fn encode_text(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let (b, l) = tokens.ids.dims2()?;
        if l != self.config.max_len {
            return Err(Error::Dimension(format!("token length {l}, expected {}", self.config.max_len)));
        }
        let h = self.config.arch.hidden_dim;
        let emb = self
            .text
            .tok
            .index_select(&tokens.ids.flatten_all()?, 0)?
            .reshape((b, l, h))?;
        let mut x = emb.broadcast_add(&self.text.pos)?;
        for block in &self.text.blocks {
            x = block.forward(&x, Some(&tokens.key_bias), None)?;
        }
        self.text.ln.forward(&x)
    }

    /// Text-guided fusion: self-attention over text, then cross-attention from
    /// text queries to image keys/values, per block. Output is `[B, L, H]`.
    pub fn fuse(&self, visual: &Tensor, textual: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let (bv, _, hv) = visual.dims3()?;
        let (bt, _, ht) = textual.dims3()?;
        if bv != bt || hv != ht {
            return Err(Error::Dimension(format!(
                "fusion inputs disagree: visual {:?}, textual {:?}",
                visual.dims(),
                textual.dims()
            )));
        }
        let mut x = textual.clone();
        for block in &self.fusion {
            x = block.forward(&x, Some(key_bias), Some(visual))?;
        }
        self.fusion_ln.forward(&x)
    }

    /// Linear projection of a `[B, H]` class vector followed by L2 normalization.
    pub fn project(&self, cls: &Tensor, side: Side) -> Result<Tensor> {
        let (_, h) = cls.dims2()?;
        if h != self.config.arch.hidden_dim {
            return Err(Error::Dimension(format!("class vector has width {h}")));
        }
        let head = match side {
            Side::Image => &self.image_proj,
            Side::Text => &self.text_proj,
        };
        let z = head.forward(cls)?;
        let norm = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
        let min = norm.to_dtype(DType::F64)?.flatten_all()?.min(0)?.to_scalar::<f64>()?;
        if !(min > 1e-12) {
            return Err(Error::numeric("projection", format!("pre-normalization norm {min}")));
        }
        Ok(z.broadcast_div(&norm)?)
    }

    /// First position of a `[B, L, H]` sequence as `[B, H]`.
    pub fn cls(seq: &Tensor) -> Result<Tensor> {
        Ok(seq.i((.., 0, ..))?.contiguous()?)
    }

    pub fn itm_logits(&self, f_cls: &Tensor) -> Result<Tensor> {
        self.heads.itm.forward(f_cls)
    }

    pub fn prd_logits(&self, f_cls: &Tensor) -> Result<Tensor> {
        self.heads.prd.forward(f_cls)
    }

    /// Vocabulary logits for `[n, H]` token representations.
    pub fn mlm_logits(&self, f_tokens: &Tensor) -> Result<Tensor> {
        self.heads.mlm.forward(f_tokens)
    }

    pub fn rtd_logits(&self, f_tokens: &Tensor) -> Result<Tensor> {
        self.heads.rtd.forward(f_tokens)
    }

    /// Full forward for aligned image/text pairs.
    pub fn forward(&self, pixels: &Tensor, tokens: &TokenBatch) -> Result<RepresentationBundle> {
        let visual = self.encode_image(pixels)?;
        let textual = self.encode_text(tokens)?;
        let fused = self.fuse(&visual, &textual, &tokens.key_bias)?;
        let image_proj = self.project(&Self::cls(&visual)?, Side::Image)?;
        let text_proj = self.project(&Self::cls(&textual)?, Side::Text)?;
        Ok(RepresentationBundle {
            visual,
            textual,
            fused,
            image_proj,
            text_proj,
        })
    }
}

/// Rows of `seq` (`[B, L, H]`) at flat `(row, position)` pairs, as `[n, H]`.
pub fn gather_positions(seq: &Tensor, positions: &[(usize, usize)]) -> Result<Tensor> {
    let (b, l, h) = seq.dims3()?;
    let idx: Vec<u32> = positions
        .iter()
        .map(|&(r, p)| {
            if r >= b || p >= l {
                Err(Error::Dimension(format!("position ({r}, {p}) outside [{b}, {l}]")))
            } else {
                Ok((r * l + p) as u32)
            }
        })
        .collect::<Result<_>>()?;
    let idx = Tensor::from_vec(idx, positions.len(), seq.device())?;
    Ok(seq.reshape((b * l, h))?.index_select(&idx, 0)?)
}
