//! The optimization loop: one [`TrainState`] mutated step by step, with
//! checkpoints, a JSON-lines log and the ablation grid on top.

mod ablate;
mod checkpoint;
mod config;
mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablate::{ablate, extended_grid, read_ablation_table, standard_grid, write_ablation_table, AblationRow, AblationVariant};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{apply_override, Paths, RunConfig, TrainConfig};
pub use optim::{clamp_temperature, AdamW, AdamWConfig, ParamGroup};

use crate::corpus::{mask_tokens, pair_batch_for_texts, Corpus, MaskedText, PairBatch, Relation, Split};
use crate::error::{Error, Result};
use crate::model::{pixel_batch, softmax_last, ModelConfig, ParamStore, RasaModel, Side, TensorMap, TokenBatch};
use crate::momentum::{MomentumState, RepQueue};
use crate::objectives::{
    build_itm_batch, generate_replacement, imc_loss, itc_loss, m_rtd_loss, mlm_logits, mlm_loss, p_itm_loss,
    prd_loss, rtd_logits, sample_replacements, ContrastiveInputs, LossReport, LossTerms, ReplacedText,
    ReplacementGenerator,
};

/// Named points inside [`TrainState::train_step`], in the order they are reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    MomentumForward,
    Contrastive,
    Matching,
    RelationDetection,
    MaskedPrediction,
    Replacement,
    Backward,
    OptimizerStep,
    TemperatureClamp,
    EmaUpdate,
    Enqueue,
}

/// Instrumentation hook called after each phase of a step.
pub trait StepObserver {
    fn on_phase(&mut self, phase: Phase, state: &TrainState);
}

/// Observer that does nothing.
pub struct NoObserver;

impl StepObserver for NoObserver {
    fn on_phase(&mut self, _: Phase, _: &TrainState) {}
}

/// Everything that changes during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: RunConfig,
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub momentum: MomentumState,
    pub image_queue: RepQueue,
    pub text_queue: RepQueue,
    pub optimizer: AdamW,
    /// Generator snapshot for the frozen replacement variant.
    pub frozen: Option<TensorMap>,
    pub step: u64,
    /// The configuration as the user wrote it (file text plus overrides), stored
    /// beside the effective echo in checkpoints.
    pub config_source: Option<String>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: u64,
    pub loss: LossReport,
    pub lr_heads: f64,
    pub lr_backbone: f64,
    pub temperature: f64,
    pub weak_pairs: usize,
    pub fallbacks: usize,
    pub millis: f64,
}

fn adamw_config(t: &TrainConfig) -> AdamWConfig {
    AdamWConfig {
        lr_heads: t.lr_heads,
        lr_backbone: t.lr_backbone,
        beta1: t.adam_beta1,
        beta2: t.adam_beta2,
        eps: t.adam_eps,
        weight_decay: t.weight_decay,
    }
}

/// Random stream for one step: the batch draw, negatives, masks and replacements.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_e90c_u64);
    rng.set_stream(epoch);
    rng
}

impl TrainState {
    /// Fresh state: random online weights, momentum copy, empty queues.
    pub fn new(config: &RunConfig, corpus: &Corpus, dtype: DType) -> Result<Self> {
        config.validate()?;
        let model_config = ModelConfig::for_corpus(config.model.clone(), &corpus.spec, &corpus.vocab)?;
        let t = &config.train;
        let params = ParamStore::init(&model_config, dtype, &Device::Cpu, t.seed, t.temperature)?;
        let momentum = MomentumState::from_online(&params, t.momentum)?;
        Self::assemble(config, model_config, params, momentum)
    }

    fn assemble(
        config: &RunConfig,
        model_config: ModelConfig,
        params: ParamStore,
        momentum: MomentumState,
    ) -> Result<Self> {
        let t = &config.train;
        let p = model_config.arch.proj_dim;
        Ok(Self {
            config: config.clone(),
            image_queue: RepQueue::new(t.queue_size, p)?,
            text_queue: RepQueue::new(t.queue_size, p)?,
            optimizer: AdamW::new(adamw_config(t)),
            model_config,
            params,
            momentum,
            frozen: None,
            step: 0,
            config_source: None,
        })
    }

    /// Resumes from a checkpoint; queues start empty.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let model_config = ckpt.model_config()?;
        let params = ParamStore::from_tensors(&model_config, &ckpt.online, dtype)?;
        let momentum_params = ckpt
            .momentum
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.to_dtype(dtype)?)))
            .collect::<Result<TensorMap>>()?;
        let momentum = MomentumState::from_tensors(momentum_params, ckpt.config.train.momentum);
        let mut state = Self::assemble(&ckpt.config, model_config, params, momentum)?;
        state.optimizer.load_state(ckpt.optimizer_steps, &ckpt.optimizer)?;
        state.frozen = ckpt.frozen.clone();
        state.step = ckpt.step;
        state.config_source = ckpt.config_source.clone();
        Ok(state)
    }

    pub fn online_model(&self) -> Result<RasaModel> {
        RasaModel::from_source(&self.model_config, &self.params)
    }

    pub fn momentum_model(&self) -> Result<RasaModel> {
        self.momentum.model(&self.model_config)
    }

    /// The model that fills masks for replaced-token detection, `None` when the run has none.
    /// A frozen generator not yet snapshotted is the online model.
    pub fn generator_model(&self) -> Result<Option<RasaModel>> {
        Ok(match self.config.train.rtd_generator {
            ReplacementGenerator::Off => None,
            ReplacementGenerator::Online => Some(self.online_model()?),
            ReplacementGenerator::Momentum => Some(self.momentum_model()?),
            ReplacementGenerator::Frozen => Some(match &self.frozen {
                Some(snapshot) => RasaModel::from_source(&self.model_config, snapshot)?,
                None => self.online_model()?,
            }),
        })
    }

    /// Steps in one epoch.
    pub fn steps_per_epoch(&self, corpus: &Corpus) -> u64 {
        let t = &self.config.train;
        if t.steps_per_epoch > 0 {
            t.steps_per_epoch as u64
        } else {
            (corpus.text_ids(Split::Train).len() as u64).div_ceil(t.batch_size as u64).max(1)
        }
    }

    /// Total steps of the configured run.
    pub fn total_steps(&self, corpus: &Corpus) -> u64 {
        let t = &self.config.train;
        let planned = t.epochs as u64 * self.steps_per_epoch(corpus);
        if t.max_steps > 0 {
            planned.min(t.max_steps as u64)
        } else {
            planned
        }
    }

    /// Draws the batch for `step`: the step's slice of the epoch's text permutation,
    /// resampled once from the whole pool if it holds a single identity.
    pub fn batch_for_step(&self, corpus: &Corpus, step: u64, rng: &mut ChaCha8Rng) -> Result<PairBatch> {
        let t = &self.config.train;
        let mut pool = corpus.text_ids(Split::Train);
        if pool.is_empty() {
            return Err(Error::Data("corpus has no training texts".into()));
        }
        let per_epoch = self.steps_per_epoch(corpus);
        let epoch = step / per_epoch;
        let within = (step % per_epoch) as usize;
        pool.shuffle(&mut epoch_rng(t.seed, epoch));
        let b = t.batch_size.min(pool.len());
        let texts: Vec<u32> = (0..b).map(|k| pool[(within * b + k) % pool.len()]).collect();
        let batch = pair_batch_for_texts(corpus, &texts, t.p_weak, t.positive_mode, rng)?;
        if batch.distinct_identities() >= 2 {
            return Ok(batch);
        }
        log::warn!("step {step}: batch holds a single identity, resampling");
        let texts: Vec<u32> = (0..b).map(|_| *rand::seq::IndexedRandom::choose(pool.as_slice(), rng).unwrap()).collect();
        let batch = pair_batch_for_texts(corpus, &texts, t.p_weak, t.positive_mode, rng)?;
        if batch.distinct_identities() < 2 {
            return Err(Error::NegativeSampling(format!("step {step}: resampled batch still holds a single identity")));
        }
        Ok(batch)
    }

    /// One optimization step on `batch`.
    pub fn train_step(
        &mut self,
        corpus: &Corpus,
        batch: &PairBatch,
        rng: &mut ChaCha8Rng,
        obs: &mut dyn StepObserver,
    ) -> Result<LossReport> {
        let t = self.config.train.clone();
        if t.rtd_generator == ReplacementGenerator::Frozen
            && self.frozen.is_none()
            && self.step >= t.frozen_generator_step as u64
        {
            self.frozen = Some(self.params.snapshot()?);
        }
        let step = self.loss_terms(corpus, batch, rng, obs)?;

        // (7) backward on the weighted total
        let weights = t.weights();
        let report = step.terms.report(&weights)?;
        let grads = step.terms.total(&weights)?.backward()?;
        obs.on_phase(Phase::Backward, self);

        // (8) optimizer step and temperature clamp
        self.optimizer.step(&self.params, &grads)?;
        obs.on_phase(Phase::OptimizerStep, self);
        clamp_temperature(&self.params, t.temperature_min, t.temperature_max)?;
        obs.on_phase(Phase::TemperatureClamp, self);

        // (9) EMA, (10) enqueue
        self.momentum.update(&self.params)?;
        obs.on_phase(Phase::EmaUpdate, self);
        self.image_queue.push_tensor(&step.image_momentum, &batch.identity_ids)?;
        self.text_queue.push_tensor(&step.text_momentum, &batch.identity_ids)?;
        obs.on_phase(Phase::Enqueue, self);

        self.step += 1;
        Ok(report)
    }

    /// Forward passes and loss terms of one step; leaves the state untouched.
    /// The terms are differentiable w.r.t. the online parameters.
    pub fn loss_terms(
        &self,
        corpus: &Corpus,
        batch: &PairBatch,
        rng: &mut ChaCha8Rng,
        obs: &mut dyn StepObserver,
    ) -> Result<StepTerms> {
        let t = &self.config.train;
        let dtype = self.params.dtype();
        let device = self.params.device().clone();
        let mc = self.model_config.clone();
        let b = batch.len();

        let images: Vec<&[f32]> = batch.image_ids.iter().map(|&i| corpus.image(i).pixels.as_slice()).collect();
        let pixels = pixel_batch(&images, &mc, dtype, &device)?;
        let rows: Vec<&[u32]> = batch.text_ids.iter().map(|&i| corpus.text(i).tokens.as_slice()).collect();
        let tokens = TokenBatch::new(&rows, &mc, dtype, &device)?;

        // (1) momentum forward
        let momentum = self.momentum_model()?;
        let m_visual = momentum.encode_image(&pixels)?.detach();
        let m_textual = momentum.encode_text(&tokens)?.detach();
        let m_image = momentum.project(&RasaModel::cls(&m_visual)?, Side::Image)?.detach();
        let m_text = momentum.project(&RasaModel::cls(&m_textual)?, Side::Text)?.detach();
        obs.on_phase(Phase::MomentumForward, self);

        let online = self.online_model()?;
        let visual = online.encode_image(&pixels)?;
        let textual = online.encode_text(&tokens)?;
        let image = online.project(&RasaModel::cls(&visual)?, Side::Image)?;
        let text = online.project(&RasaModel::cls(&textual)?, Side::Text)?;
        let mut terms = LossTerms::default();

        // (2) contrastive
        let image_queue = self.image_queue.view(dtype, &device)?;
        let text_queue = self.text_queue.view(dtype, &device)?;
        let cl = ContrastiveInputs {
            image: &image,
            text: &text,
            image_momentum: &m_image,
            text_momentum: &m_text,
            image_queue: image_queue.as_ref(),
            text_queue: text_queue.as_ref(),
            identity_ids: &batch.identity_ids,
            temp: online.temperature(),
            exclude_same_identity: t.exclude_same_identity,
        };
        terms.itc = Some(itc_loss(&cl)?);
        terms.imc = Some(imc_loss(&cl)?);
        obs.on_phase(Phase::Contrastive, self);

        // (3) matching with in-batch negatives, (4) relation detection on positives
        if t.enable_itm || t.enable_prd {
            let positive_cls = if t.enable_itm {
                let sim = image
                    .detach()
                    .matmul(&text.detach().t()?)?
                    .broadcast_div(&online.temperature().detach())?
                    .to_dtype(DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?;
                let itm = build_itm_batch(&batch.identity_ids, &sim, t.negative_sampling, rng)?;
                let n = itm.len();
                let img_idx = Tensor::from_vec(itm.image_rows(), n, &device)?;
                let txt_idx = Tensor::from_vec(itm.text_rows(), n, &device)?;
                let fused = online.fuse(
                    &visual.index_select(&img_idx, 0)?,
                    &textual.index_select(&txt_idx, 0)?,
                    &tokens.key_bias.index_select(&txt_idx, 0)?,
                )?;
                let f_cls = RasaModel::cls(&fused)?;
                terms.p_itm = Some(p_itm_loss(&online.itm_logits(&f_cls)?, &itm.labels())?);
                obs.on_phase(Phase::Matching, self);
                f_cls.narrow(0, 0, b)?
            } else {
                RasaModel::cls(&online.fuse(&visual, &textual, &tokens.key_bias)?)?
            };
            if t.enable_prd {
                terms.prd = Some(prd_loss(&online.prd_logits(&positive_cls)?, &batch.relations)?);
                obs.on_phase(Phase::RelationDetection, self);
            }
        }

        // (5) masked prediction and (6) replaced-token detection, strong pairs only
        let strong: Vec<u32> = (0..b as u32).filter(|&i| batch.relations[i as usize] == Relation::Strong).collect();
        if t.enable_mlm && !strong.is_empty() {
            let masked: Vec<MaskedText> = strong
                .iter()
                .map(|&i| mask_tokens(rows[i as usize], t.p_mask, rng))
                .collect::<Result<_>>()?;
            let strong_idx = Tensor::from_vec(strong.clone(), strong.len(), &device)?;
            let strong_visual = visual.index_select(&strong_idx, 0)?;
            let logits = mlm_logits(&online, &strong_visual, &masked)?;
            terms.mlm = Some(mlm_loss(&logits, &masked)?);
            obs.on_phase(Phase::MaskedPrediction, self);

            let from_online = |rng: &mut ChaCha8Rng| -> Result<Vec<ReplacedText>> {
                sample_replacements(&masked, &softmax_last(&logits.detach())?, rng)
            };
            let replaced = match t.rtd_generator {
                ReplacementGenerator::Off => None,
                ReplacementGenerator::Online => Some(from_online(rng)?),
                ReplacementGenerator::Momentum => Some(generate_replacement(
                    &momentum,
                    &m_visual.index_select(&strong_idx, 0)?,
                    &masked,
                    rng,
                )?),
                ReplacementGenerator::Frozen => match &self.frozen {
                    Some(snapshot) => {
                        let frozen = RasaModel::from_source(&mc, snapshot)?;
                        let frozen_visual = frozen.encode_image(&pixel_batch(
                            &strong.iter().map(|&i| images[i as usize]).collect::<Vec<_>>(),
                            &mc,
                            dtype,
                            &device,
                        )?)?;
                        Some(generate_replacement(&frozen, &frozen_visual, &masked, rng)?)
                    }
                    None => Some(from_online(rng)?),
                },
            };
            if let Some(replaced) = replaced {
                terms.m_rtd = Some(m_rtd_loss(&rtd_logits(&online, &strong_visual, &replaced)?, &replaced)?);
                obs.on_phase(Phase::Replacement, self);
            }
        }

        Ok(StepTerms {
            terms,
            image_momentum: m_image,
            text_momentum: m_text,
        })
    }

    pub fn temperature(&self) -> Result<f64> {
        Ok(self
            .params
            .get(crate::model::TEMPERATURE)
            .ok_or_else(|| Error::Dimension("missing temperature".into()))?
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?[0])
    }
}

/// Loss terms of one step plus the momentum projections it will enqueue.
#[derive(Debug, Clone)]
pub struct StepTerms {
    pub terms: LossTerms,
    pub image_momentum: Tensor,
    pub text_momentum: Tensor,
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<LogRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Runs `state` up to the configured step count.
///
/// With `out_dir` set, writes the JSON-lines log (appending when resuming),
/// epoch checkpoints and `final.safetensors`; a numeric failure also leaves a
/// `failure-step<N>.json` dump of the offending batch.
pub fn train(
    state: &mut TrainState,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    obs: &mut dyn StepObserver,
) -> Result<TrainSummary> {
    if corpus.text_ids(Split::Train).is_empty() {
        return Err(Error::Data("corpus has no training split".into()));
    }
    let total = state.total_steps(corpus);
    let per_epoch = state.steps_per_epoch(corpus);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(dir.join(TRAIN_LOG))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let mut records = Vec::new();
    while state.step < total {
        let step = state.step;
        let started = Instant::now();
        let mut rng = step_rng(state.config.train.seed, step);
        let batch = state.batch_for_step(corpus, step, &mut rng)?;
        let report = match state.train_step(corpus, &batch, &mut rng, obs) {
            Ok(r) => r,
            Err(e) => {
                if let (Some(dir), Error::Numeric { .. }) = (out_dir, &e) {
                    dump_failure(dir, step, &batch, &e)?;
                }
                return Err(e);
            }
        };
        let record = LogRecord {
            step,
            epoch: step / per_epoch,
            loss: report,
            lr_heads: state.config.train.lr_heads,
            lr_backbone: state.config.train.lr_backbone,
            temperature: state.temperature()?,
            weak_pairs: batch.relations.iter().filter(|&&r| r == Relation::Weak).count(),
            fallbacks: batch.fallbacks,
            millis: started.elapsed().as_secs_f64() * 1e3,
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        if record.step % 50 == 0 {
            log::info!("step {} total {:.4} temp {:.4}", record.step, report.total, record.temperature);
        }
        records.push(record);
        let every = state.config.train.checkpoint_every as u64;
        if let Some(dir) = out_dir {
            if every > 0 && state.step % per_epoch == 0 && (state.step / per_epoch) % every == 0 {
                let epoch = state.step / per_epoch;
                save_checkpoint(&dir.join(format!("checkpoint-epoch{epoch:04}.safetensors")), state)?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&p, state)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainSummary {
        records,
        final_checkpoint,
        log: out_dir.map(|d| d.join(TRAIN_LOG)),
    })
}

fn dump_failure(dir: &Path, step: u64, batch: &PairBatch, err: &Error) -> Result<()> {
    let dump = serde_json::json!({
        "step": step,
        "error": err.to_string(),
        "text_ids": batch.text_ids,
        "image_ids": batch.image_ids,
        "identity_ids": batch.identity_ids,
        "relations": batch.relations,
    });
    let f = File::create(dir.join(format!("failure-step{step}.json")))?;
    serde_json::to_writer_pretty(f, &dump)?;
    Ok(())
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
