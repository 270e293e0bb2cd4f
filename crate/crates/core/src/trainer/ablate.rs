use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{train, NoObserver, RunConfig, TrainState};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::eval::evaluate_retrieval;

/// A named set of `section.key=value` overrides applied to a base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub overrides: Vec<String>,
}

impl AblationVariant {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn apply(&self, base: &RunConfig, seed: u64) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        overrides.push(format!("train.seed={seed}"));
        RunConfig::parse(&base.to_toml()?, &overrides)
    }
}

const NO_SA: [&str; 2] = ["train.enable_mlm=false", "train.rtd_generator=\"off\""];

/// Contrastive only, then relation-aware added, then sensitivity-aware added.
pub fn standard_grid() -> Vec<AblationVariant> {
    vec![
        AblationVariant::new("CL", &["train.enable_itm=false", "train.enable_prd=false", NO_SA[0], NO_SA[1]]),
        AblationVariant::new("CL+RA", &["train.positive_mode=\"probabilistic\"", "train.enable_prd=true", NO_SA[0], NO_SA[1]]),
        AblationVariant::new("CL+RA+SA", &["train.positive_mode=\"probabilistic\"", "train.enable_prd=true", "train.rtd_generator=\"momentum\""]),
    ]
}

/// The matching and replacement variants side by side.
pub fn extended_grid() -> Vec<AblationVariant> {
    let ra = |mode: &str, prd: bool| {
        vec![
            format!("train.positive_mode=\"{mode}\""),
            format!("train.enable_prd={prd}"),
            NO_SA[0].to_string(),
            NO_SA[1].to_string(),
        ]
    };
    let sa = |gen: &str| vec!["train.enable_mlm=true".to_string(), format!("train.rtd_generator=\"{gen}\"")];
    let v = |name: &str, o: Vec<String>| AblationVariant {
        name: name.into(),
        overrides: o,
    };
    let mut grid = standard_grid();
    grid.extend([
        v("CL+ITM", ra("uniform_all", false)),
        v("CL+s-ITM", ra("strong_only", false)),
        v("CL+p-ITM", ra("probabilistic", false)),
        v("CL+RA+MLM", sa("off")),
        v("CL+RA+f-RTD", sa("frozen")),
        v("CL+RA+o-RTD", sa("online")),
        v("CL+RA+m-RTD", sa("momentum")),
    ]);
    grid
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub fingerprint: String,
    pub steps: u64,
    pub reranked: bool,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
}

/// Trains every variant under every seed on `corpus` and evaluates it on the configured split.
pub fn ablate(
    base: &RunConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
    corpus: &Corpus,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one variant and one seed".into()));
    }
    let configs = variants
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| Ok((v, s, v.apply(base, s)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (v, seed, cfg) in configs {
        log::info!("ablation: {} seed {seed}", v.name);
        let run_dir = out_dir.map(|d| d.join(format!("{}-seed{seed}", v.name.replace('+', "_"))));
        let mut state = TrainState::new(&cfg, corpus, DType::F32)?;
        train(&mut state, corpus, run_dir.as_deref(), &mut NoObserver)?;
        let opts = cfg.eval.rank_options(cfg.train.enable_itm);
        let eval = evaluate_retrieval(&state.online_model()?, corpus, cfg.eval.split, &opts)?;
        rows.push(AblationRow {
            variant: v.name.clone(),
            seed,
            fingerprint: cfg.fingerprint()?,
            steps: state.step,
            reranked: opts.rerank,
            r1: eval.metrics.r1,
            r5: eval.metrics.r5,
            r10: eval.metrics.r10,
            map: eval.metrics.map,
        });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("ablation table: {e}"))
}

pub fn write_ablation_table(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_table(path: &Path) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}
