//! Split-level evaluation: retrieval metrics plus probes of the relation and
//! replaced-token heads.

use candle_core::{DType, IndexOp, Tensor};
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{mask_tokens, Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{pixel_batch, RasaModel, TokenBatch};
use crate::objectives::{generate_replacement, replaced_positions, rtd_logits};
use crate::retrieval::{
    embed_gallery, rank_queries, relevance, MetricsReport, RankOptions, RankingResult, SimilaritySpace,
    DEFAULT_SHORTLIST,
};
use crate::trainer::TrainState;

const PROBE_CHUNK: usize = 64;

/// Whether the matching head reranks the shortlist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMode {
    /// Rerank when the run trained the matching head.
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    /// Shortlist size of the first stage.
    pub k: usize,
    pub rerank: RerankMode,
    pub space: SimilaritySpace,
    /// Seed for the probes' weak-image choice and masking.
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            k: DEFAULT_SHORTLIST,
            rerank: RerankMode::Auto,
            space: SimilaritySpace::Projection,
            probe_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("eval.k must be >= 1".into()));
        }
        Ok(())
    }

    /// Ranking options; `matching_trained` resolves [`RerankMode::Auto`].
    pub fn rank_options(&self, matching_trained: bool) -> RankOptions {
        RankOptions {
            k: self.k,
            rerank: match self.rerank {
                RerankMode::Auto => matching_trained,
                RerankMode::On => true,
                RerankMode::Off => false,
            },
            space: self.space,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalEval {
    pub metrics: MetricsReport,
    pub rankings: Vec<RankingResult>,
}

/// Every text of `split` queries the split's image gallery.
pub fn evaluate_retrieval(model: &RasaModel, corpus: &Corpus, split: Split, opts: &RankOptions) -> Result<RetrievalEval> {
    let gallery = corpus.image_ids(split);
    let queries = corpus.text_ids(split);
    if queries.is_empty() {
        return Err(Error::Protocol(format!("split {split:?} has no texts")));
    }
    let index = embed_gallery(model, corpus, &gallery)?;
    let rankings = rank_queries(model, corpus, &queries, &index, opts)?;
    let metrics = MetricsReport::from_relevance(&relevance(corpus, &rankings))?;
    Ok(RetrievalEval { metrics, rankings })
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(1)?.to_vec1::<u32>()?)
}

/// Accuracy of the relation head on a balanced set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationProbe {
    pub accuracy: f64,
    pub strong_accuracy: f64,
    pub weak_accuracy: f64,
    pub pairs: usize,
}

/// Pairs every text of `split` with its source image (strong) and with one
/// other image of its identity (weak), then scores the relation head.
pub fn relation_probe(model: &RasaModel, corpus: &Corpus, split: Split, seed: u64) -> Result<RelationProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(u32, u32, u32)> = Vec::new();
    for tid in corpus.text_ids(split) {
        let t = corpus.text(tid);
        pairs.push((tid, t.source_image_id, 0));
        let others: Vec<u32> = corpus
            .images_of(t.identity_id)
            .iter()
            .copied()
            .filter(|&i| i != t.source_image_id)
            .collect();
        if let Some(&w) = others.choose(&mut rng) {
            pairs.push((tid, w, 1));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Protocol(format!("split {split:?} has no texts")));
    }
    let cfg = model.config();
    let (mut hits, mut strong, mut weak, mut n_strong, mut n_weak) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for chunk in pairs.chunks(PROBE_CHUNK) {
        let images: Vec<&[f32]> = chunk.iter().map(|p| corpus.image(p.1).pixels.as_slice()).collect();
        let rows: Vec<&[u32]> = chunk.iter().map(|p| corpus.text(p.0).tokens.as_slice()).collect();
        let pixels = pixel_batch(&images, cfg, model.dtype(), model.device())?;
        let tokens = TokenBatch::new(&rows, cfg, model.dtype(), model.device())?;
        let fused = model.fuse(&model.encode_image(&pixels)?, &model.encode_text(&tokens)?, &tokens.key_bias)?;
        let pred = argmax_rows(&model.prd_logits(&RasaModel::cls(&fused)?)?)?;
        for (p, &y) in chunk.iter().zip(&pred) {
            let ok = p.2 == y;
            hits += ok as usize;
            if p.2 == 0 {
                n_strong += 1;
                strong += ok as usize;
            } else {
                n_weak += 1;
                weak += ok as usize;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(RelationProbe {
        accuracy: ratio(hits, pairs.len()),
        strong_accuracy: ratio(strong, n_strong),
        weak_accuracy: ratio(weak, n_weak),
        pairs: pairs.len(),
    })
}

/// Detection quality of the replaced-token head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplacementProbe {
    /// Fraction of replaced positions flagged as replaced.
    pub replaced_recall: f64,
    /// Fraction of unreplaced scored positions flagged as original.
    pub original_accuracy: f64,
    pub replaced_positions: usize,
    pub original_positions: usize,
}

/// Masks every text of `split` with its source image, lets `generator` refill
/// the masks and scores the detector's predictions.
pub fn replacement_probe(
    detector: &RasaModel,
    generator: &RasaModel,
    corpus: &Corpus,
    split: Split,
    p_mask: f64,
    seed: u64,
) -> Result<ReplacementProbe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = detector.config();
    let texts = corpus.text_ids(split);
    if texts.is_empty() {
        return Err(Error::Protocol(format!("split {split:?} has no texts")));
    }
    let (mut rep_hits, mut rep_n, mut orig_hits, mut orig_n) = (0usize, 0usize, 0usize, 0usize);
    for chunk in texts.chunks(PROBE_CHUNK) {
        let images: Vec<&[f32]> = chunk
            .iter()
            .map(|&t| corpus.image(corpus.text(t).source_image_id).pixels.as_slice())
            .collect();
        let pixels = pixel_batch(&images, cfg, detector.dtype(), detector.device())?;
        let masked = chunk
            .iter()
            .map(|&t| mask_tokens(&corpus.text(t).tokens, p_mask, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let replaced = generate_replacement(generator, &generator.encode_image(&pixels)?, &masked, &mut rng)?;
        let logits = rtd_logits(detector, &detector.encode_image(&pixels)?, &replaced)?;
        let pred = argmax_rows(&logits)?;
        let positions = replaced_positions(&replaced);
        debug_assert_eq!(positions.len(), pred.len());
        for (&(row, pos), &y) in positions.iter().zip(&pred) {
            if replaced[row].replaced[pos] {
                rep_n += 1;
                rep_hits += (y == 1) as usize;
            } else {
                orig_n += 1;
                orig_hits += (y == 0) as usize;
            }
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ReplacementProbe {
        replaced_recall: ratio(rep_hits, rep_n),
        original_accuracy: ratio(orig_hits, orig_n),
        replaced_positions: rep_n,
        original_positions: orig_n,
    })
}

/// Everything `eval` reports for one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub reranked: bool,
    pub metrics: MetricsReport,
    pub relation: RelationProbe,
    /// Absent when the run trained no replaced-token detector.
    pub replacement: Option<ReplacementProbe>,
}

/// Retrieval metrics and both head probes for a training state.
pub fn evaluate_state(state: &TrainState, corpus: &Corpus, eval: &EvalConfig) -> Result<(EvalReport, Vec<RankingResult>)> {
    eval.validate()?;
    let online = state.online_model()?;
    let opts = eval.rank_options(state.config.train.enable_itm);
    let retrieval = evaluate_retrieval(&online, corpus, eval.split, &opts)?;
    let relation = relation_probe(&online, corpus, eval.split, eval.probe_seed)?;
    let replacement = match state.generator_model()? {
        Some(generator) => Some(replacement_probe(
            &online,
            &generator,
            corpus,
            eval.split,
            state.config.train.p_mask,
            eval.probe_seed,
        )?),
        None => None,
    };
    let report = EvalReport {
        split: eval.split,
        reranked: opts.rerank,
        metrics: retrieval.metrics,
        relation,
        replacement,
    };
    Ok((report, retrieval.rankings))
}

/// Cosine similarity of the fused `[CLS]` for two images under one text.
pub fn fused_cls_cosine(model: &RasaModel, corpus: &Corpus, text_id: u32, images: [u32; 2]) -> Result<f64> {
    let cfg = model.config();
    let px: Vec<&[f32]> = images.iter().map(|&i| corpus.image(i).pixels.as_slice()).collect();
    let tok = corpus.text(text_id).tokens.as_slice();
    let pixels = pixel_batch(&px, cfg, model.dtype(), model.device())?;
    let tokens = TokenBatch::new(&[tok, tok], cfg, model.dtype(), model.device())?;
    let fused = model.fuse(&model.encode_image(&pixels)?, &model.encode_text(&tokens)?, &tokens.key_bias)?;
    let cls = RasaModel::cls(&fused)?.to_dtype(DType::F64)?;
    let a = cls.i(0)?.to_vec1::<f64>()?;
    let b = cls.i(1)?.to_vec1::<f64>()?;
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(dot / (na * nb))
}
