use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Split, Vocab};
use crate::error::{Error, Result};

/// How the positive image is chosen for a text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// Always the annotated image (s-ITM).
    StrongOnly,
    /// Another image of the identity with probability `p_w`, else the annotated one (p-ITM).
    Probabilistic,
    /// Uniform over all images of the identity (vanilla ITM).
    UniformAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Strong,
    Weak,
}

impl Relation {
    /// Class index of the one-hot relation label: strong `[1, 0]`, weak `[0, 1]`.
    pub fn class(self) -> u32 {
        match self {
            Relation::Strong => 0,
            Relation::Weak => 1,
        }
    }
}

/// Positive image-text pairs, stored as corpus ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub text_ids: Vec<u32>,
    /// The sampled positive image (strong or weak).
    pub image_ids: Vec<u32>,
    /// The image each text annotates.
    pub source_image_ids: Vec<u32>,
    pub identity_ids: Vec<u32>,
    pub relations: Vec<Relation>,
    /// Weak draws that fell back to strong because the identity has a single image.
    pub fallbacks: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.text_ids.is_empty()
    }

    pub fn distinct_identities(&self) -> usize {
        let mut ids = self.identity_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }
}

/// Chooses positive images for the given texts.
pub fn pair_batch_for_texts<R: Rng + ?Sized>(
    corpus: &Corpus,
    text_ids: &[u32],
    p_w: f64,
    mode: PositiveMode,
    rng: &mut R,
) -> Result<PairBatch> {
    if !(0.0..=1.0).contains(&p_w) {
        return Err(Error::Config(format!("p_w must be in [0, 1], got {p_w}")));
    }
    let mut batch = PairBatch::default();
    for &tid in text_ids {
        let text = corpus
            .texts
            .get(tid as usize)
            .ok_or_else(|| Error::Data(format!("unknown text id {tid}")))?;
        let source = text.source_image_id;
        let others: Vec<u32> = corpus
            .images_of(text.identity_id)
            .iter()
            .copied()
            .filter(|&i| i != source)
            .collect();
        let image = match mode {
            PositiveMode::StrongOnly => source,
            PositiveMode::Probabilistic => {
                if rng.random_bool(p_w) {
                    match others.choose(rng) {
                        Some(&img) => img,
                        None => {
                            batch.fallbacks += 1;
                            log::debug!("identity {} has a single image; weak draw falls back", text.identity_id);
                            source
                        }
                    }
                } else {
                    source
                }
            }
            PositiveMode::UniformAll => *corpus
                .images_of(text.identity_id)
                .choose(rng)
                .expect("identity without images"),
        };
        batch.text_ids.push(tid);
        batch.image_ids.push(image);
        batch.source_image_ids.push(source);
        batch.identity_ids.push(text.identity_id);
        batch.relations.push(if image == source { Relation::Strong } else { Relation::Weak });
    }
    Ok(batch)
}

/// Draws `batch_size` texts uniformly (with replacement) from `split`, then their positives.
pub fn sample_pair_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    p_w: f64,
    mode: PositiveMode,
    rng: &mut R,
) -> Result<PairBatch> {
    let pool = corpus.text_ids(split);
    if pool.is_empty() {
        return Err(Error::Data(format!("split {split:?} has no texts")));
    }
    let texts: Vec<u32> = (0..batch_size).map(|_| *pool.choose(rng).unwrap()).collect();
    pair_batch_for_texts(corpus, &texts, p_w, mode, rng)
}

/// A text with some tokens replaced by `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub tokens: Vec<u32>,
    /// Masked indices, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub originals: Vec<u32>,
}

/// Masks each non-special token independently with probability `p_m`.
///
/// At least one token is always masked: when the draw masks nothing, one
/// eligible position is chosen uniformly.
pub fn mask_tokens<R: Rng + ?Sized>(tokens: &[u32], p_m: f64, rng: &mut R) -> Result<MaskedText> {
    if !(p_m > 0.0 && p_m < 1.0) {
        return Err(Error::Masking(format!("p_m must be in (0, 1), got {p_m}")));
    }
    let eligible: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| !Vocab::is_special(t))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Masking("text has no maskable tokens".into()));
    }
    let mut positions: Vec<usize> = eligible.iter().copied().filter(|_| rng.random_bool(p_m)).collect();
    if positions.is_empty() {
        positions.push(*eligible.choose(rng).unwrap());
    }
    let mut masked = tokens.to_vec();
    let originals = positions.iter().map(|&i| tokens[i]).collect();
    for &i in &positions {
        masked[i] = Vocab::MASK_ID;
    }
    Ok(MaskedText {
        tokens: masked,
        positions,
        originals,
    })
}
