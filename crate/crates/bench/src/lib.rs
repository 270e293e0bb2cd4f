//! Shared fixtures for the benchmarks in `benches/`.

use candle_core::DType;
use rasa_core::corpus::{generate_corpus, Corpus};
use rasa_core::trainer::{RunConfig, TrainState};

/// Default configuration, optionally adjusted with `section.key=value` overrides.
pub fn config(overrides: &[&str]) -> RunConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::parse("", &overrides).expect("benchmark configuration")
}

/// The corpus and a freshly initialized training state for `cfg`.
pub fn fixture(cfg: &RunConfig) -> (Corpus, TrainState) {
    let corpus = generate_corpus(&cfg.corpus).expect("corpus");
    let state = TrainState::new(cfg, &corpus, DType::F32).expect("state");
    (corpus, state)
}
