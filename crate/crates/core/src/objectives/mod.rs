//! Training objectives.
//!
//! * contrastive: InfoNCE over momentum queues, cross-modal (ITC) and intra-modal (IMC);
//! * matching: hard-negative construction, probabilistic ITM and positive relation detection;
//! * language: masked prediction, generator-based word replacement and replaced-token detection;
//! * joint: the weighted combination reported per step.

mod contrastive;
mod joint;
mod language;
mod matching;

pub use contrastive::{imc_loss, info_nce, itc_loss, ContrastiveInputs};
pub use joint::{joint_loss, LossComponents, LossReport, LossTerms, LossWeights};
pub use language::{
    generate_replacement, m_rtd_loss, masked_positions, mlm_logits, mlm_loss, replaced_positions, rtd_logits,
    rtd_positions, sample_replacements, ReplacedText, ReplacementGenerator,
};
pub use matching::{build_itm_batch, cross_entropy, p_itm_loss, prd_loss, ItmBatch, NegativeSampling};
