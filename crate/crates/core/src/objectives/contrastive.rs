use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::model::{log_softmax_last, MASKED_LOGIT};
use crate::momentum::QueueView;

fn temperature_value(temp: &Tensor) -> Result<f64> {
    let t = temp.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    match t.as_slice() {
        [v] if *v > 0.0 && v.is_finite() => Ok(*v),
        [v] => Err(Error::Config(format!("temperature must be positive, got {v}"))),
        _ => Err(Error::Dimension(format!("temperature must hold one value, has {}", t.len()))),
    }
}

/// InfoNCE with in-batch positives and an optional queue of extra candidates.
///
/// Row `i` of `anchors` is scored against every row of `positives` followed by
/// the queue; its positive is `positives[i]`. The loss is
/// `-mean_i log softmax(anchors[i] . candidates / temp)[i]`. With
/// `exclude_same_identity`, candidates other than the positive that share the
/// anchor's identity are dropped from the denominator. Inputs are expected
/// to be unit-norm so the dot product is the cosine similarity.
pub fn info_nce(
    anchors: &Tensor,
    positives: &Tensor,
    queue: Option<&QueueView>,
    anchor_ids: &[u32],
    temp: &Tensor,
    exclude_same_identity: bool,
) -> Result<Tensor> {
    temperature_value(temp)?;
    let (b, d) = anchors.dims2()?;
    if positives.dims() != [b, d] {
        return Err(Error::Dimension(format!(
            "positives {:?} do not match anchors {:?}",
            positives.dims(),
            anchors.dims()
        )));
    }
    if anchor_ids.len() != b {
        return Err(Error::Dimension(format!("{} ids for {b} anchors", anchor_ids.len())));
    }
    let mut cand_ids = anchor_ids.to_vec();
    let candidates = match queue {
        Some(q) => {
            if q.vectors.dim(1)? != d {
                return Err(Error::Dimension(format!("queue width {} != {d}", q.vectors.dim(1)?)));
            }
            cand_ids.extend_from_slice(&q.ids);
            Tensor::cat(&[positives, &q.vectors.to_dtype(positives.dtype())?], 0)?
        }
        None => positives.clone(),
    };
    let c = cand_ids.len();
    let mut logits = anchors.matmul(&candidates.t()?)?.broadcast_div(temp)?;
    if exclude_same_identity {
        let mut bias = vec![0f64; b * c];
        let mut any = false;
        for i in 0..b {
            for (j, &id) in cand_ids.iter().enumerate() {
                if j != i && id == anchor_ids[i] {
                    bias[i * c + j] = MASKED_LOGIT;
                    any = true;
                }
            }
        }
        if any {
            let bias = Tensor::from_vec(bias, (b, c), anchors.device())?.to_dtype(logits.dtype())?;
            logits = (logits + bias)?;
        }
    }
    let logp = log_softmax_last(&logits)?;
    let diag = Tensor::from_vec((0..b as u32).collect::<Vec<_>>(), (b, 1), anchors.device())?;
    Ok(logp.gather(&diag, 1)?.mean_all()?.neg()?)
}

/// Online and momentum projections of one batch plus the momentum queues.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveInputs<'a> {
    pub image: &'a Tensor,
    pub text: &'a Tensor,
    pub image_momentum: &'a Tensor,
    pub text_momentum: &'a Tensor,
    pub image_queue: Option<&'a QueueView>,
    pub text_queue: Option<&'a QueueView>,
    pub identity_ids: &'a [u32],
    pub temp: &'a Tensor,
    pub exclude_same_identity: bool,
}

/// Cross-modal term: image anchors against momentum texts, text anchors against momentum images.
pub fn itc_loss(x: &ContrastiveInputs<'_>) -> Result<Tensor> {
    let i2t = info_nce(x.image, x.text_momentum, x.text_queue, x.identity_ids, x.temp, x.exclude_same_identity)?;
    let t2i = info_nce(x.text, x.image_momentum, x.image_queue, x.identity_ids, x.temp, x.exclude_same_identity)?;
    Ok(((i2t + t2i)? / 2.0)?)
}

/// Intra-modal term: each modality against its own momentum counterpart and queue.
pub fn imc_loss(x: &ContrastiveInputs<'_>) -> Result<Tensor> {
    let i2i = info_nce(x.image, x.image_momentum, x.image_queue, x.identity_ids, x.temp, x.exclude_same_identity)?;
    let t2t = info_nce(x.text, x.text_momentum, x.text_queue, x.identity_ids, x.temp, x.exclude_same_identity)?;
    Ok(((i2i + t2t)? / 2.0)?)
}
