//! Relation- and sensitivity-aware multimodal representation learning for
//! text-to-image person retrieval, at desk scale.
//!
//! The crate is organized along the pipeline:
//!
//! * [`corpus`] - synthetic identities with occlusion noise, tokenization, pair sampling and masking.
//! * [`model`] - image/text encoders, text-guided fusion encoder, projections and task heads.
//! * [`momentum`] - the EMA twin of the online parameters and the projection queues.
//! * [`objectives`] - contrastive, matching, relation-detection, masked-prediction and
//!   replaced-token-detection losses and their weighted combination.
//! * [`trainer`] - the optimization loop, checkpoints and the ablation grid.
//! * [`retrieval`] - shortlist-then-rerank text-to-image ranking, R@K and mAP.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod momentum;
pub mod objectives;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
