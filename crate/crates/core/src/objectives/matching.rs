use candle_core::Tensor;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Relation;
use crate::error::{Error, Result};
use crate::model::log_softmax_last;

/// Mean cross-entropy of `[n, C]` logits against class indices.
pub fn cross_entropy(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    if targets.len() != n || n == 0 {
        return Err(Error::Dimension(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(Error::Dimension(format!("target class {bad} out of {c}")));
    }
    let idx = Tensor::from_vec(targets.to_vec(), (n, 1), logits.device())?;
    Ok(log_softmax_last(logits)?.gather(&idx, 1)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Probability proportional to the softmaxed cross-modal similarity.
    Hard,
    Uniform,
}

/// In-batch negatives for matching: one negative text per image and one negative image per text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItmBatch {
    pub neg_text_for_image: Vec<usize>,
    pub neg_image_for_text: Vec<usize>,
}

impl ItmBatch {
    pub fn len(&self) -> usize {
        3 * self.neg_text_for_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neg_text_for_image.is_empty()
    }

    /// Image row for each of the `3B` pairs: positives, (image, negative text), (negative image, text).
    pub fn image_rows(&self) -> Vec<u32> {
        let b = self.neg_text_for_image.len();
        (0..b)
            .chain(0..b)
            .chain(self.neg_image_for_text.iter().copied())
            .map(|i| i as u32)
            .collect()
    }

    pub fn text_rows(&self) -> Vec<u32> {
        let b = self.neg_text_for_image.len();
        (0..b)
            .chain(self.neg_text_for_image.iter().copied())
            .chain(0..b)
            .map(|i| i as u32)
            .collect()
    }

    /// Class indices of the one-hot matching labels: positive `[0, 1]` is class 1, negative `[1, 0]` class 0.
    pub fn labels(&self) -> Vec<u32> {
        let b = self.neg_text_for_image.len();
        std::iter::repeat_n(1, b).chain(std::iter::repeat_n(0, 2 * b)).collect()
    }
}

fn sample_candidate<R: Rng + ?Sized>(
    scores: impl Iterator<Item = (usize, f64)>,
    mode: NegativeSampling,
    rng: &mut R,
) -> Option<usize> {
    let cands: Vec<(usize, f64)> = scores.collect();
    if cands.is_empty() {
        return None;
    }
    let weights: Vec<f64> = match mode {
        NegativeSampling::Uniform => vec![1.0; cands.len()],
        NegativeSampling::Hard => {
            let max = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            cands.iter().map(|c| (c.1 - max).exp()).collect()
        }
    };
    let dist = WeightedIndex::new(&weights).ok()?;
    Some(cands[dist.sample(rng)].0)
}

/// Samples matching negatives from a batch.
///
/// `similarity` is row-major `[B, B]` with images on rows and texts on
/// columns, already scaled by the temperature. Candidates sharing the
/// anchor's identity are never chosen.
pub fn build_itm_batch<R: Rng + ?Sized>(
    identity_ids: &[u32],
    similarity: &[f64],
    mode: NegativeSampling,
    rng: &mut R,
) -> Result<ItmBatch> {
    let b = identity_ids.len();
    if similarity.len() != b * b {
        return Err(Error::Dimension(format!("similarity has {} entries for batch {b}", similarity.len())));
    }
    let mut neg_text_for_image = Vec::with_capacity(b);
    let mut neg_image_for_text = Vec::with_capacity(b);
    for i in 0..b {
        let eligible = |j: &usize| identity_ids[*j] != identity_ids[i];
        let t = sample_candidate((0..b).filter(eligible).map(|j| (j, similarity[i * b + j])), mode, rng);
        let v = sample_candidate((0..b).filter(eligible).map(|j| (j, similarity[j * b + i])), mode, rng);
        match (t, v) {
            (Some(t), Some(v)) => {
                neg_text_for_image.push(t);
                neg_image_for_text.push(v);
            }
            _ => {
                return Err(Error::NegativeSampling(format!(
                    "no candidate of a different identity for element {i}"
                )))
            }
        }
    }
    Ok(ItmBatch {
        neg_text_for_image,
        neg_image_for_text,
    })
}

/// Matching loss over positives and constructed negatives.
pub fn p_itm_loss(itm_logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    cross_entropy(itm_logits, labels)
}

/// Strong/weak classification over positive pairs only.
pub fn prd_loss(prd_logits: &Tensor, relations: &[Relation]) -> Result<Tensor> {
    if relations.is_empty() {
        return Err(Error::Contract("relation detection needs at least one positive pair".into()));
    }
    let targets: Vec<u32> = relations.iter().map(|r| r.class()).collect();
    cross_entropy(prd_logits, &targets)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;
    use proptest::strategy::Strategy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn logits(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_vec(rows.concat(), (rows.len(), 2), &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn two_identities_force_the_other_element() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_itm_batch(&[3, 9], &[0.0; 4], NegativeSampling::Hard, &mut rng).unwrap();
        assert_eq!(b.neg_text_for_image, vec![1, 0]);
        assert_eq!(b.neg_image_for_text, vec![1, 0]);
        assert_eq!(b.image_rows(), vec![0, 1, 0, 1, 1, 0]);
        assert_eq!(b.text_rows(), vec![0, 1, 1, 0, 0, 1]);
        assert_eq!(b.labels(), vec![1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn single_identity_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_itm_batch(&[4, 4, 4], &[0.0; 9], NegativeSampling::Hard, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NegativeSampling(_)));
    }

    #[test]
    fn negatives_never_share_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids = [0, 0, 1, 1, 2, 2, 3, 0];
        let sim: Vec<f64> = (0..64).map(|k| ((k * 37 % 11) as f64) / 3.0).collect();
        for _ in 0..200 {
            let b = build_itm_batch(&ids, &sim, NegativeSampling::Hard, &mut rng).unwrap();
            for i in 0..ids.len() {
                assert_ne!(ids[b.neg_text_for_image[i]], ids[i]);
                assert_ne!(ids[b.neg_image_for_text[i]], ids[i]);
            }
        }
    }

    #[test]
    fn uniform_similarities_give_uniform_choice() {
        // Anchor 0 (identity 0) has 5 eligible candidates (rows 1..=5).
        let ids = [0, 1, 2, 3, 4, 5];
        let sim = vec![0.25; 36];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = [0usize; 6];
        let draws = 10_000;
        for _ in 0..draws {
            let b = build_itm_batch(&ids, &sim, NegativeSampling::Hard, &mut rng).unwrap();
            counts[b.neg_text_for_image[0]] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, 99.9th percentile.
        assert!(chi2 < 18.47, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn hard_sampling_prefers_similar_candidates() {
        let ids = [0, 1, 2];
        let mut sim = vec![0.0; 9];
        sim[1] = 5.0; // image 0 vs text 1
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..2000)
            .filter(|_| build_itm_batch(&ids, &sim, NegativeSampling::Hard, &mut rng).unwrap().neg_text_for_image[0] == 1)
            .count();
        let p = 5f64.exp() / (5f64.exp() + 1.0);
        assert!((hits as f64 / 2000.0 - p).abs() < 0.03);
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let l = logits(&[[-1000.0, 1000.0], [1000.0, -1000.0]]);
        assert_eq!(scalar(&p_itm_loss(&l, &[1, 0]).unwrap()), 0.0);
        let l = logits(&[[1000.0, -1000.0], [1000.0, -1000.0]]);
        assert_eq!(scalar(&prd_loss(&l, &[Relation::Strong, Relation::Strong]).unwrap()), 0.0);
    }

    #[test]
    fn uniform_predictions_give_ln2() {
        let l = logits(&[[0.3, 0.3], [-2.0, -2.0], [1.0, 1.0]]);
        let v = scalar(&p_itm_loss(&l, &[1, 0, 0]).unwrap());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// Cross-entropy written from probabilities: -mean log p_target.
    fn ce_oracle(rows: &[[f64; 2]], targets: &[usize]) -> f64 {
        rows.iter()
            .zip(targets)
            .map(|(r, &t)| {
                let z: f64 = r.iter().map(|x| x.exp()).sum();
                -(r[t].exp() / z).ln()
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    #[test]
    fn toy_batches_match_cross_entropy_oracle() {
        let rows = [[0.2, 1.3], [-0.7, 0.4], [2.0, -1.0]];
        let v = scalar(&p_itm_loss(&logits(&rows), &[1, 0, 0]).unwrap());
        assert!((v - ce_oracle(&rows, &[1, 0, 0])).abs() < 1e-12);

        let rels = [Relation::Strong, Relation::Weak, Relation::Weak];
        let v = scalar(&prd_loss(&logits(&rows), &rels).unwrap());
        assert!((v - ce_oracle(&rows, &[0, 1, 1])).abs() < 1e-12);
    }

    #[test]
    fn relation_labels_follow_one_hot_coding() {
        assert_eq!(Relation::Strong.class(), 0);
        assert_eq!(Relation::Weak.class(), 1);
        let l = logits(&[]);
        assert!(matches!(prd_loss(&l, &[]), Err(Error::Contract(_))));
    }

    proptest::proptest! {
        #[test]
        fn matching_pairs_are_labeled_by_identity(
            ids in proptest::collection::vec(0u32..4, 2..12).prop_filter("two identities", |v| v.iter().any(|&x| x != v[0])),
            sim_seed: u64,
            hard: bool,
        ) {
            let b = ids.len();
            let mut rng = ChaCha8Rng::seed_from_u64(sim_seed);
            let sim: Vec<f64> = (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mode = if hard { NegativeSampling::Hard } else { NegativeSampling::Uniform };
            let batch = build_itm_batch(&ids, &sim, mode, &mut rng).unwrap();
            let (images, texts, labels) = (batch.image_rows(), batch.text_rows(), batch.labels());
            proptest::prop_assert_eq!(images.len(), 3 * b);
            proptest::prop_assert_eq!(texts.len(), 3 * b);
            for k in 0..3 * b {
                let same = ids[images[k] as usize] == ids[texts[k] as usize];
                proptest::prop_assert_eq!(labels[k] == 1, k < b);
                proptest::prop_assert_eq!(same, labels[k] == 1);
                if k < b {
                    proptest::prop_assert_eq!(images[k], texts[k]);
                }
            }
        }

        #[test]
        fn matching_losses_are_finite_and_non_negative(
            raw in proptest::collection::vec((-40.0f64..40.0, -40.0f64..40.0, proptest::bool::ANY), 1..16),
        ) {
            let rows: Vec<[f64; 2]> = raw.iter().map(|&(a, b, _)| [a, b]).collect();
            let labels: Vec<u32> = raw.iter().map(|&(_, _, y)| y as u32).collect();
            let relations: Vec<Relation> = raw.iter().map(|&(_, _, y)| if y { Relation::Weak } else { Relation::Strong }).collect();
            let itm = scalar(&p_itm_loss(&logits(&rows), &labels).unwrap());
            let prd = scalar(&prd_loss(&logits(&rows), &relations).unwrap());
            proptest::prop_assert!(itm.is_finite() && itm >= 0.0);
            proptest::prop_assert!(prd.is_finite() && prd >= 0.0);
        }
    }
}
