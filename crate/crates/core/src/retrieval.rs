//! Text-to-image retrieval: cosine shortlist over projected embeddings, then
//! reranking of the shortlist by the matching head, and the R@K / mAP metrics.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{pixel_batch, softmax_last, RasaModel, Side, TokenBatch};

/// Default shortlist size.
pub const DEFAULT_SHORTLIST: usize = 128;

const EMBED_CHUNK: usize = 64;
const RERANK_CHUNK: usize = 256;

/// Which vectors the first stage compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    /// Unit-norm projections, the space the contrastive losses train.
    #[default]
    Projection,
    /// Raw `[CLS]` vectors, L2-normalized.
    RawCls,
}

/// Embedded gallery images.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    pub image_ids: Vec<u32>,
    pub identity_ids: Vec<u32>,
    /// Unit-norm projected image vectors, one row per image.
    pub vectors: Vec<Vec<f64>>,
    /// Unit-norm raw `[CLS]` vectors.
    pub raw: Vec<Vec<f64>>,
    /// Visual sequences `[G, M + 1, H]` kept for reranking.
    pub visual: Tensor,
}

impl GalleryIndex {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    fn space(&self, space: SimilaritySpace) -> &[Vec<f64>] {
        match space {
            SimilaritySpace::Projection => &self.vectors,
            SimilaritySpace::RawCls => &self.raw,
        }
    }
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn unit_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut rows = rows_f64(t)?;
    for r in &mut rows {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 1e-12) {
            return Err(Error::numeric("retrieval", "zero-norm class vector"));
        }
        r.iter_mut().for_each(|x| *x /= n);
    }
    Ok(rows)
}

/// Encodes gallery images in fixed-size chunks.
pub fn embed_gallery(model: &RasaModel, corpus: &Corpus, image_ids: &[u32]) -> Result<GalleryIndex> {
    if image_ids.is_empty() {
        return Err(Error::Contract("gallery is empty".into()));
    }
    let mut vectors = Vec::with_capacity(image_ids.len());
    let mut raw = Vec::with_capacity(image_ids.len());
    let mut visual = Vec::new();
    for chunk in image_ids.chunks(EMBED_CHUNK) {
        let pixels: Vec<&[f32]> = chunk.iter().map(|&i| corpus.image(i).pixels.as_slice()).collect();
        let pixels = pixel_batch(&pixels, model.config(), model.dtype(), model.device())?;
        let v = model.encode_image(&pixels)?.detach();
        let cls = RasaModel::cls(&v)?;
        vectors.extend(rows_f64(&model.project(&cls, Side::Image)?)?);
        raw.extend(unit_rows(&cls)?);
        visual.push(v);
    }
    Ok(GalleryIndex {
        image_ids: image_ids.to_vec(),
        identity_ids: image_ids.iter().map(|&i| corpus.image(i).identity_id).collect(),
        vectors,
        raw,
        visual: Tensor::cat(&visual, 0)?,
    })
}

/// Unit-norm projected text vectors, one per id.
pub fn embed_texts(model: &RasaModel, corpus: &Corpus, text_ids: &[u32]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(text_ids.len());
    for chunk in text_ids.chunks(EMBED_CHUNK) {
        let rows: Vec<&[u32]> = chunk.iter().map(|&t| corpus.text(t).tokens.as_slice()).collect();
        let tokens = TokenBatch::new(&rows, model.config(), model.dtype(), model.device())?;
        let cls = RasaModel::cls(&model.encode_text(&tokens)?)?;
        out.extend(rows_f64(&model.project(&cls, Side::Text)?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub image_id: u32,
    /// Cosine similarity for stage 1, matching probability for stage 2.
    pub score: f64,
    /// 1 or 2: the stage whose score fixed this position.
    pub stage: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub query_text_id: u32,
    pub items: Vec<RankedItem>,
    /// Effective shortlist size after clipping.
    pub k: usize,
}

impl RankingResult {
    pub fn image_ids(&self) -> Vec<u32> {
        self.items.iter().map(|it| it.image_id).collect()
    }
}

/// Descending by score, then ascending by image id.
fn by_score_then_id(a: (f64, u32), b: (f64, u32)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Orders gallery positions by descending `scores`, ties by smaller image id.
pub fn order_by_score(image_ids: &[u32], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..image_ids.len()).collect();
    order.sort_by(|&a, &b| by_score_then_id((scores[a], image_ids[a]), (scores[b], image_ids[b])));
    order
}

/// Composes the two-stage ranking.
///
/// Stage 1 orders all images by `stage1` scores. `rescore` receives the
/// gallery positions of the top `k` (k clipped to `[1, len]`) and returns one
/// score per position; those images are reordered by it and followed by the
/// stage-1 remainder.
pub fn compose_two_stage(
    image_ids: &[u32],
    stage1: &[f64],
    k: usize,
    rescore: impl FnOnce(&[usize]) -> Result<Vec<f64>>,
) -> Result<(Vec<RankedItem>, usize)> {
    if image_ids.len() != stage1.len() {
        return Err(Error::Dimension(format!("{} ids for {} scores", image_ids.len(), stage1.len())));
    }
    if image_ids.is_empty() {
        return Err(Error::Contract("gallery is empty".into()));
    }
    let k = k.clamp(1, image_ids.len());
    let order = order_by_score(image_ids, stage1);
    let shortlist = &order[..k];
    let rescored = rescore(shortlist)?;
    if rescored.len() != k {
        return Err(Error::Dimension(format!("rescoring returned {} scores for {k}", rescored.len())));
    }
    let mut top: Vec<(usize, f64)> = shortlist.iter().copied().zip(rescored).collect();
    top.sort_by(|a, b| by_score_then_id((a.1, image_ids[a.0]), (b.1, image_ids[b.0])));
    let mut items: Vec<RankedItem> = top
        .into_iter()
        .map(|(g, s)| RankedItem {
            image_id: image_ids[g],
            score: s,
            stage: 2,
        })
        .collect();
    items.extend(order[k..].iter().map(|&g| RankedItem {
        image_id: image_ids[g],
        score: stage1[g],
        stage: 1,
    }));
    Ok((items, k))
}

/// Options for [`rank_queries`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    /// Shortlist size; clipped to the gallery size.
    pub k: usize,
    /// When false, the ranking is stage 1 only.
    pub rerank: bool,
    pub space: SimilaritySpace,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_SHORTLIST,
            rerank: true,
            space: SimilaritySpace::Projection,
        }
    }
}

/// Matching-head positive probabilities for one text sequence against gallery rows.
fn itm_probabilities(
    model: &RasaModel,
    textual: &Tensor,
    key_bias: &Tensor,
    index: &GalleryIndex,
    rows: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len());
    let (_, l, h) = textual.dims3()?;
    for chunk in rows.chunks(RERANK_CHUNK) {
        let n = chunk.len();
        let idx = Tensor::from_vec(chunk.iter().map(|&r| r as u32).collect::<Vec<_>>(), n, index.visual.device())?;
        let visual = index.visual.index_select(&idx, 0)?;
        let text = textual.broadcast_as((n, l, h))?.contiguous()?;
        let bias = key_bias.broadcast_as((n, 1, 1, l))?.contiguous()?;
        let fused = model.fuse(&visual, &text, &bias)?;
        let p = softmax_last(&model.itm_logits(&RasaModel::cls(&fused)?)?)?;
        out.extend(p.i((.., 1))?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

/// Ranks the gallery for each query text.
pub fn rank_queries(
    model: &RasaModel,
    corpus: &Corpus,
    query_text_ids: &[u32],
    index: &GalleryIndex,
    opts: &RankOptions,
) -> Result<Vec<RankingResult>> {
    let mut results = Vec::with_capacity(query_text_ids.len());
    for chunk in query_text_ids.chunks(EMBED_CHUNK) {
        let rows: Vec<&[u32]> = chunk.iter().map(|&t| corpus.text(t).tokens.as_slice()).collect();
        let tokens = TokenBatch::new(&rows, model.config(), model.dtype(), model.device())?;
        let textual = model.encode_text(&tokens)?.detach();
        let cls = RasaModel::cls(&textual)?;
        let queries = match opts.space {
            SimilaritySpace::Projection => rows_f64(&model.project(&cls, Side::Text)?)?,
            SimilaritySpace::RawCls => unit_rows(&cls)?,
        };
        let gallery = index.space(opts.space);
        for (qi, &text_id) in chunk.iter().enumerate() {
            let q = &queries[qi];
            let stage1: Vec<f64> = gallery.iter().map(|g| dot(q, g)).collect();
            let (items, k) = if opts.rerank {
                let t = textual.i(qi..qi + 1)?;
                let bias = tokens.key_bias.i(qi..qi + 1)?;
                compose_two_stage(&index.image_ids, &stage1, opts.k, |rows| {
                    itm_probabilities(model, &t, &bias, index, rows)
                })?
            } else {
                let order = order_by_score(&index.image_ids, &stage1);
                let items = order
                    .into_iter()
                    .map(|g| RankedItem {
                        image_id: index.image_ids[g],
                        score: stage1[g],
                        stage: 1,
                    })
                    .collect();
                (items, 0)
            };
            results.push(RankingResult {
                query_text_id: text_id,
                items,
                k,
            });
        }
    }
    Ok(results)
}

/// Single-query form of [`rank_queries`].
pub fn rank_two_stage(
    model: &RasaModel,
    corpus: &Corpus,
    query_text_id: u32,
    index: &GalleryIndex,
    k: usize,
) -> Result<RankingResult> {
    let opts = RankOptions {
        k,
        ..Default::default()
    };
    Ok(rank_queries(model, corpus, &[query_text_id], index, &opts)?.remove(0))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relevance flags in ranked order: an image is relevant when it shows the query's identity.
pub fn relevance(corpus: &Corpus, rankings: &[RankingResult]) -> Vec<Vec<bool>> {
    rankings
        .iter()
        .map(|r| {
            let who = corpus.text(r.query_text_id).identity_id;
            r.items.iter().map(|it| corpus.image(it.image_id).identity_id == who).collect()
        })
        .collect()
}

fn check_relevant(relevance: &[Vec<bool>]) -> Result<()> {
    if relevance.is_empty() {
        return Err(Error::Protocol("no queries".into()));
    }
    if let Some(q) = relevance.iter().position(|r| !r.iter().any(|&x| x)) {
        return Err(Error::Protocol(format!("query {q} has no relevant image in the gallery")));
    }
    Ok(())
}

/// Percentage of queries with at least one relevant image in the top `k`.
pub fn recall_at_k(relevance: &[Vec<bool>], k: usize) -> Result<f64> {
    check_relevant(relevance)?;
    let hits = relevance.iter().filter(|r| r.iter().take(k).any(|&x| x)).count();
    Ok(100.0 * hits as f64 / relevance.len() as f64)
}

/// Average of precision@rank over the ranks of relevant items.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let total = relevance.iter().filter(|&&x| x).count();
    if total == 0 {
        return Err(Error::Protocol("query has no relevant image".into()));
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / total as f64)
}

/// Mean average precision, with the per-query values.
pub fn mean_average_precision(relevance: &[Vec<bool>]) -> Result<(f64, Vec<f64>)> {
    check_relevant(relevance)?;
    let aps = relevance.iter().map(|r| average_precision(r)).collect::<Result<Vec<_>>>()?;
    Ok((aps.iter().sum::<f64>() / aps.len() as f64, aps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub n_queries: usize,
    pub gallery_size: usize,
    pub per_query_ap: Vec<f64>,
}

impl MetricsReport {
    pub fn from_relevance(relevance: &[Vec<bool>]) -> Result<Self> {
        let (map, per_query_ap) = mean_average_precision(relevance)?;
        Ok(Self {
            r1: recall_at_k(relevance, 1)?,
            r5: recall_at_k(relevance, 5)?,
            r10: recall_at_k(relevance, 10)?,
            map,
            n_queries: relevance.len(),
            gallery_size: relevance[0].len(),
            per_query_ap,
        })
    }
}

/// Writes rankings as TSV: `query_id, rank, image_id, score, stage`, ranks from 1.
pub fn write_rankings_tsv(path: &Path, rankings: &[RankingResult]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "query_id\trank\timage_id\tscore\tstage")?;
    for r in rankings {
        for (i, it) in r.items.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", r.query_text_id, i + 1, it.image_id, it.score, it.stage)?;
        }
    }
    w.flush()?;
    Ok(())
}
