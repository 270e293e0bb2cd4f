use candle_core::{DType, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matching::cross_entropy;
use crate::corpus::{MaskedText, Vocab};
use crate::error::{Error, Result};
use crate::model::{gather_positions, softmax_last, RasaModel, TokenBatch};

/// Which network proposes the replacement words for replaced-token detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementGenerator {
    /// The EMA twin (m-RTD).
    Momentum,
    /// The online model itself, detached (o-RTD).
    Online,
    /// A snapshot of the online model taken at a configured step (f-RTD).
    Frozen,
    /// No replacement detection.
    Off,
}

/// A text whose masked positions were refilled by a generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplacedText {
    pub tokens: Vec<u32>,
    /// True where the generated token differs from the original.
    pub replaced: Vec<bool>,
}

/// Positions scored by the detection head: everything except `[CLS]`, `[PAD]` and `[MASK]`.
pub fn rtd_positions(tokens: &[u32]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| !Vocab::is_special(t))
        .map(|(i, _)| i)
        .collect()
}

/// `(row, position)` of every masked token across a batch of masked texts, row-major.
pub fn masked_positions(masked: &[MaskedText]) -> Vec<(usize, usize)> {
    masked
        .iter()
        .enumerate()
        .flat_map(|(r, m)| m.positions.iter().map(move |&p| (r, p)))
        .collect()
}

/// `(row, position)` of every detection target across a batch of replaced texts.
pub fn replaced_positions(replaced: &[ReplacedText]) -> Vec<(usize, usize)> {
    replaced
        .iter()
        .enumerate()
        .flat_map(|(r, t)| rtd_positions(&t.tokens).into_iter().map(move |p| (r, p)))
        .collect()
}

/// Vocabulary logits at the masked positions, `[n_masked, V]`, from fusing `visual` with the masked texts.
pub fn mlm_logits(model: &RasaModel, visual: &Tensor, masked: &[MaskedText]) -> Result<Tensor> {
    let rows: Vec<&[u32]> = masked.iter().map(|m| m.tokens.as_slice()).collect();
    let tokens = TokenBatch::new(&rows, model.config(), model.dtype(), model.device())?;
    let textual = model.encode_text(&tokens)?;
    let fused = model.fuse(visual, &textual, &tokens.key_bias)?;
    model.mlm_logits(&gather_positions(&fused, &masked_positions(masked))?)
}

/// Detection logits at every scored position, `[n, 2]`.
pub fn rtd_logits(model: &RasaModel, visual: &Tensor, replaced: &[ReplacedText]) -> Result<Tensor> {
    let rows: Vec<&[u32]> = replaced.iter().map(|r| r.tokens.as_slice()).collect();
    let tokens = TokenBatch::new(&rows, model.config(), model.dtype(), model.device())?;
    let textual = model.encode_text(&tokens)?;
    let fused = model.fuse(visual, &textual, &tokens.key_bias)?;
    model.rtd_logits(&gather_positions(&fused, &replaced_positions(replaced))?)
}

/// Masked-token cross-entropy; `logits` rows follow [`masked_positions`] order.
pub fn mlm_loss(logits: &Tensor, masked: &[MaskedText]) -> Result<Tensor> {
    let targets: Vec<u32> = masked.iter().flat_map(|m| m.originals.iter().copied()).collect();
    if targets.is_empty() {
        return Err(Error::Contract("masked prediction needs at least one masked position".into()));
    }
    cross_entropy(logits, &targets)
}

/// Replaced-token detection cross-entropy; class 1 means "replaced".
pub fn m_rtd_loss(logits: &Tensor, replaced: &[ReplacedText]) -> Result<Tensor> {
    let targets: Vec<u32> = replaced
        .iter()
        .flat_map(|t| rtd_positions(&t.tokens).into_iter().map(move |p| t.replaced[p] as u32))
        .collect();
    if targets.is_empty() {
        return Err(Error::Contract("replaced-token detection needs at least one scored position".into()));
    }
    cross_entropy(logits, &targets)
}

/// Samples a token per masked position from `probs` (`[n_masked, V]`, rows in
/// [`masked_positions`] order) at temperature 1. Special tokens get zero
/// probability; a row with no mass left keeps the original token.
pub fn sample_replacements<R: Rng + ?Sized>(
    masked: &[MaskedText],
    probs: &Tensor,
    rng: &mut R,
) -> Result<Vec<ReplacedText>> {
    let probs = probs.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let n: usize = masked.iter().map(|m| m.positions.len()).sum();
    if probs.len() != n {
        return Err(Error::Dimension(format!("{} generator rows for {n} masked positions", probs.len())));
    }
    let mut rows = probs.into_iter();
    let mut out = Vec::with_capacity(masked.len());
    for m in masked {
        let mut tokens = m.tokens.clone();
        let mut replaced = vec![false; tokens.len()];
        for (&pos, &orig) in m.positions.iter().zip(&m.originals) {
            let mut p = rows.next().unwrap();
            for (id, w) in p.iter_mut().enumerate() {
                if Vocab::is_special(id as u32) || !w.is_finite() || *w < 0.0 {
                    *w = 0.0;
                }
            }
            let tok = match WeightedIndex::new(&p) {
                Ok(d) => d.sample(rng) as u32,
                Err(_) => orig,
            };
            tokens[pos] = tok;
            replaced[pos] = tok != orig;
        }
        out.push(ReplacedText { tokens, replaced });
    }
    Ok(out)
}

/// Runs a generator on the masked texts and samples replacements from its
/// masked-prediction distribution. Nothing here is differentiated.
pub fn generate_replacement<R: Rng + ?Sized>(
    generator: &RasaModel,
    visual: &Tensor,
    masked: &[MaskedText],
    rng: &mut R,
) -> Result<Vec<ReplacedText>> {
    let logits = mlm_logits(generator, &visual.detach(), masked)?.detach();
    sample_replacements(masked, &softmax_last(&logits)?, rng)
}

#[cfg(test)]
mod tests {
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn masked(tokens: &[u32], positions: &[usize]) -> MaskedText {
        let mut t = tokens.to_vec();
        let originals = positions.iter().map(|&p| tokens[p]).collect();
        for &p in positions {
            t[p] = Vocab::MASK_ID;
        }
        MaskedText {
            tokens: t,
            positions: positions.to_vec(),
            originals,
        }
    }

    fn tensor(rows: &[Vec<f64>]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(rows.concat(), (rows.len(), c), &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn one_hot(v: usize, id: usize) -> Vec<f64> {
        let mut p = vec![0.0; v];
        p[id] = 1.0;
        p
    }

    #[test]
    fn faithful_generator_flags_nothing() {
        let m = masked(&[1, 5, 6, 7, 0, 0], &[1, 3]);
        let probs = tensor(&[one_hot(8, 5), one_hot(8, 7)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = sample_replacements(std::slice::from_ref(&m), &probs, &mut rng).unwrap();
        assert_eq!(r[0].tokens, vec![1, 5, 6, 7, 0, 0]);
        assert!(r[0].replaced.iter().all(|&f| !f));
    }

    #[test]
    fn unmasked_positions_are_copied_and_unflagged() {
        let m = masked(&[1, 5, 6, 7, 4, 0], &[2]);
        let probs = tensor(&[one_hot(8, 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = &sample_replacements(std::slice::from_ref(&m), &probs, &mut rng).unwrap()[0];
        assert_eq!(r.tokens, vec![1, 5, 3, 7, 4, 0]);
        assert_eq!(r.replaced, vec![false, false, true, false, false, false]);
    }

    #[test]
    fn specials_are_never_generated() {
        let m = masked(&[1, 5, 6, 0], &[1, 2]);
        let mut heavy = vec![0.3, 0.3, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
        heavy[7] = 0.1;
        let probs = tensor(&[heavy.clone(), heavy]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let r = &sample_replacements(std::slice::from_ref(&m), &probs, &mut rng).unwrap()[0];
            assert_eq!(r.tokens[1..3], [7, 7]);
        }
        // All mass on specials: the original token is kept.
        let probs = tensor(&[one_hot(8, Vocab::PAD_ID as usize), one_hot(8, Vocab::MASK_ID as usize)]);
        let r = &sample_replacements(std::slice::from_ref(&m), &probs, &mut rng).unwrap()[0];
        assert_eq!(r.tokens, vec![1, 5, 6, 0]);
    }

    #[test]
    fn uniform_generator_flags_one_minus_inverse_vocab() {
        // Uniform over the 8 non-special ids of an 11-token vocabulary.
        let v = 11;
        let words = v - Vocab::N_SPECIAL as usize;
        let uniform = vec![1.0 / v as f64; v];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut flagged, mut total) = (0usize, 0usize);
        for k in 0..5000u32 {
            let orig = Vocab::N_SPECIAL + (k % words as u32);
            let m = masked(&[1, orig, orig, 0], &[1, 2]);
            let probs = tensor(&[uniform.clone(), uniform.clone()]);
            let r = &sample_replacements(std::slice::from_ref(&m), &probs, &mut rng).unwrap()[0];
            flagged += r.replaced.iter().filter(|&&f| f).count();
            total += 2;
        }
        let expected = 1.0 - 1.0 / words as f64;
        let rate = flagged as f64 / total as f64;
        // 4.5 binomial standard deviations at n = 10000.
        let bound = 4.5 * (expected * (1.0 - expected) / total as f64).sqrt();
        assert!((rate - expected).abs() < bound, "rate {rate}, expected {expected}");
    }

    #[test]
    fn positions_skip_specials() {
        assert_eq!(rtd_positions(&[1, 4, 2, 9, 0, 0]), vec![1, 3]);
        let ms = vec![masked(&[1, 4, 5, 0], &[2]), masked(&[1, 6, 7, 8], &[1, 3])];
        assert_eq!(masked_positions(&ms), vec![(0, 2), (1, 1), (1, 3)]);
    }

    #[test]
    fn uniform_heads_give_ln2() {
        // Vocabulary of two: uniform logits over {0, 1}.
        let v = scalar(&mlm_loss(&tensor(&[vec![0.0, 0.0]]), &[MaskedText {
            tokens: vec![1, 2],
            positions: vec![1],
            originals: vec![1],
        }])
        .unwrap());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let r = ReplacedText {
            tokens: vec![1, 3, 4, 0],
            replaced: vec![false, true, false, false],
        };
        let v = scalar(&m_rtd_loss(&tensor(&[vec![0.4, 0.4], vec![-1.0, -1.0]]), &[r]).unwrap());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(mlm_loss(&tensor(&[vec![0.0]]), &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_position_gives_negative_log_probability() {
        let p: f64 = 0.37;
        // Logits whose softmax assigns p to class 4 among 6 classes.
        let rest = (1.0 - p) / 5.0;
        let logits: Vec<f64> = (0..6).map(|c| if c == 4 { p.ln() } else { rest.ln() }).collect();
        let m = masked(&[1, 4, 0], &[1]);
        let v = scalar(&mlm_loss(&tensor(&[logits]), &[m]).unwrap());
        assert!((v + p.ln()).abs() < 1e-12);
    }

    /// Mean of -log softmax(row)[target], written out longhand.
    fn ce_oracle(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
        let mut acc = 0.0;
        for (r, &t) in rows.iter().zip(targets) {
            let z: f64 = r.iter().map(|x| x.exp()).sum();
            acc -= (r[t].exp() / z).ln();
        }
        acc / rows.len() as f64
    }

    #[test]
    fn multi_position_cases_match_oracle() {
        let ms = vec![masked(&[1, 3, 4, 5, 0], &[1, 3]), masked(&[1, 6, 7, 0, 0], &[2])];
        let rows = vec![
            vec![0.1, -0.3, 0.8, 1.1, 0.0, 0.2, -2.0, 0.5],
            vec![1.0, 0.3, -0.8, 0.1, 0.4, 0.9, 0.0, 0.0],
            vec![-0.2, 0.2, 0.6, 0.3, 0.1, -1.1, 0.7, 2.0],
        ];
        let v = scalar(&mlm_loss(&tensor(&rows), &ms).unwrap());
        assert!((v - ce_oracle(&rows, &[3, 5, 7])).abs() < 1e-12);

        let reps = vec![
            ReplacedText {
                tokens: vec![1, 3, 9, 5, 0],
                replaced: vec![false, false, true, false, false],
            },
            ReplacedText {
                tokens: vec![1, 6, 7, 0, 0],
                replaced: vec![false; 5],
            },
        ];
        assert_eq!(replaced_positions(&reps), vec![(0, 1), (0, 2), (0, 3), (1, 1), (1, 2)]);
        let rows: Vec<Vec<f64>> = (0..5).map(|k| vec![0.3 * k as f64, -0.2 * k as f64 + 0.5]).collect();
        let v = scalar(&m_rtd_loss(&tensor(&rows), &reps).unwrap());
        assert!((v - ce_oracle(&rows, &[0, 1, 0, 0, 0])).abs() < 1e-12);
    }

    #[test]
    fn confident_original_detection_gives_zero() {
        let r = ReplacedText {
            tokens: vec![1, 3, 4, 0],
            replaced: vec![false; 4],
        };
        let rows = vec![vec![1000.0, -1000.0], vec![1000.0, -1000.0]];
        assert_eq!(scalar(&m_rtd_loss(&tensor(&rows), &[r]).unwrap()), 0.0);
    }

    fn masked_text_strategy() -> impl proptest::strategy::Strategy<Value = MaskedText> {
        use proptest::prelude::*;
        (proptest::collection::vec(Vocab::N_SPECIAL..12, 1..10), 0usize..4)
            .prop_flat_map(|(words, pad)| {
                let n = words.len();
                (Just(words), Just(pad), proptest::sample::subsequence((1..=n).collect::<Vec<_>>(), 1..=n))
            })
            .prop_map(|(words, pad, positions)| {
                let mut tokens = vec![Vocab::CLS_ID];
                tokens.extend(&words);
                tokens.extend(std::iter::repeat_n(Vocab::PAD_ID, pad));
                masked(&tokens, &positions)
            })
    }

    proptest::proptest! {
        #[test]
        fn replacement_flags_mark_exactly_the_changed_tokens(
            m in masked_text_strategy(),
            weights in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 12), 10),
            seed: u64,
        ) {
            let rows: Vec<Vec<f64>> = weights[..m.positions.len()].to_vec();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = &sample_replacements(std::slice::from_ref(&m), &tensor(&rows), &mut rng).unwrap()[0];
            proptest::prop_assert_eq!(r.tokens.len(), m.tokens.len());
            proptest::prop_assert_eq!(r.replaced.len(), m.tokens.len());
            for i in 0..m.tokens.len() {
                match m.positions.iter().position(|&p| p == i) {
                    Some(k) => {
                        let orig = m.originals[k];
                        proptest::prop_assert!(!Vocab::is_special(r.tokens[i]));
                        proptest::prop_assert_eq!(r.replaced[i], r.tokens[i] != orig);
                    }
                    None => {
                        proptest::prop_assert_eq!(r.tokens[i], m.tokens[i]);
                        proptest::prop_assert!(!r.replaced[i]);
                    }
                }
            }
            let scored = rtd_positions(&r.tokens);
            proptest::prop_assert!((0..r.tokens.len()).filter(|i| r.replaced[*i]).all(|i| scored.contains(&i)));
        }

        #[test]
        fn language_losses_are_finite_and_non_negative(
            m in masked_text_strategy(),
            logits in proptest::collection::vec(-30.0f64..30.0, 12 * 10),
            detect in proptest::collection::vec(-30.0f64..30.0, 2 * 13),
            seed: u64,
        ) {
            let n = m.positions.len();
            let mlm = mlm_loss(&Tensor::from_vec(logits[..n * 12].to_vec(), (n, 12), &Device::Cpu).unwrap(), std::slice::from_ref(&m)).unwrap();
            let v = scalar(&mlm);
            proptest::prop_assert!(v.is_finite() && v >= 0.0);

            let probs = tensor(&vec![vec![1.0 / 12.0; 12]; n]);
            let r = sample_replacements(std::slice::from_ref(&m), &probs, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let k = replaced_positions(&r).len();
            let rtd = m_rtd_loss(&Tensor::from_vec(detect[..k * 2].to_vec(), (k, 2), &Device::Cpu).unwrap(), &r).unwrap();
            let v = scalar(&rtd);
            proptest::prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
