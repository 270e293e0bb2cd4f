use candle_core::DType;
use rasa_core::corpus::{generate_corpus, Corpus, Split};
use rasa_core::eval::evaluate_retrieval;
use rasa_core::model::TensorMap;
use rasa_core::trainer::{
    ablate, load_checkpoint, read_log, step_rng, train, AblationVariant, NoObserver, Phase, RunConfig, StepObserver,
    TrainState, FINAL_CHECKPOINT,
};

const TINY: &[&str] = &[
    "corpus.n_identities=4",
    "corpus.test_identities=0",
    "corpus.images_per_identity=2",
    "model.image_layers=1",
    "model.text_layers=1",
    "model.cross_layers=1",
    "model.hidden_dim=16",
    "model.heads=2",
    "model.mlp_ratio=2",
    "model.proj_dim=8",
    "train.batch_size=8",
    "train.queue_size=32",
    "train.lr_heads=1e-3",
    "train.lr_backbone=1e-3",
    "train.epochs=2",
];

fn config(extra: &[&str]) -> RunConfig {
    let overrides: Vec<String> = TINY.iter().chain(extra).map(|s| s.to_string()).collect();
    RunConfig::parse("", &overrides).unwrap()
}

fn setup(extra: &[&str]) -> (RunConfig, Corpus, TrainState) {
    let cfg = config(extra);
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let state = TrainState::new(&cfg, &corpus, DType::F32).unwrap();
    (cfg, corpus, state)
}

fn flat(map: &TensorMap) -> Vec<f32> {
    map.values()
        .flat_map(|t| t.flatten_all().unwrap().to_dtype(DType::F32).unwrap().to_vec1::<f32>().unwrap())
        .collect()
}

#[derive(Default)]
struct Recorder {
    phases: Vec<Phase>,
    momentum: Vec<(Phase, Vec<f32>)>,
    online: Vec<(Phase, Vec<f32>)>,
}

impl StepObserver for Recorder {
    fn on_phase(&mut self, phase: Phase, state: &TrainState) {
        self.phases.push(phase);
        self.momentum.push((phase, flat(state.momentum.params().unwrap())));
        self.online.push((phase, flat(&state.params.snapshot().unwrap())));
    }
}

fn one_step(state: &mut TrainState, corpus: &Corpus, obs: &mut dyn StepObserver) {
    let s = state.step;
    let mut rng = step_rng(state.config.train.seed, s);
    let batch = state.batch_for_step(corpus, s, &mut rng).unwrap();
    state.train_step(corpus, &batch, &mut rng, obs).unwrap();
}

#[test]
fn phases_fire_in_documented_order() {
    let (_, corpus, mut state) = setup(&[]);
    let mut rec = Recorder::default();
    one_step(&mut state, &corpus, &mut rec);
    use Phase::*;
    assert_eq!(
        rec.phases,
        vec![
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
            Enqueue
        ]
    );
    assert_eq!(state.step, 1);
    assert_eq!(state.image_queue.len(), 8);
}

#[test]
fn only_the_ema_writes_the_momentum_weights() {
    let (_, corpus, mut state) = setup(&[]);
    one_step(&mut state, &corpus, &mut NoObserver);
    let mut rec = Recorder::default();
    one_step(&mut state, &corpus, &mut rec);
    let before = &rec.momentum[0].1;
    for (phase, m) in &rec.momentum {
        let same = m == before;
        match phase {
            Phase::EmaUpdate | Phase::Enqueue => assert!(!same, "{phase:?}"),
            _ => assert!(same, "{phase:?} touched the momentum weights"),
        }
    }
    // Backward leaves the online weights alone; the optimizer moves them.
    let online: Vec<&Vec<f32>> = rec.online.iter().map(|(_, v)| v).collect();
    let at = |p: Phase| rec.phases.iter().position(|&q| q == p).unwrap();
    assert_eq!(online[at(Phase::Backward)], online[0]);
    assert_ne!(online[at(Phase::OptimizerStep)], online[0]);
}

#[test]
fn fixed_seed_reproduces_the_loss_sequence() {
    let run = |seed: &str| {
        let (_, corpus, mut state) = setup(&["train.epochs=3", "train.max_steps=5", seed]);
        let summary = train(&mut state, &corpus, None, &mut NoObserver).unwrap();
        summary.records.into_iter().map(|r| r.loss).collect::<Vec<_>>()
    };
    let a = run("train.seed=4");
    assert_eq!(a.len(), 5);
    assert_eq!(a, run("train.seed=4"));
    assert_ne!(a, run("train.seed=5"));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let (_, corpus, mut state) = setup(&["train.epochs=0"]);
    let init = state.params.snapshot().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let summary = train(&mut state, &corpus, Some(dir.path()), &mut NoObserver).unwrap();
    assert!(summary.records.is_empty());
    let ckpt = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(flat(&ckpt.online), flat(&init));
    assert_eq!(flat(&ckpt.momentum), flat(&init));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let (_, corpus, mut full) = setup(&[]);
    let full_dir = tempfile::tempdir().unwrap();
    train(&mut full, &corpus, Some(full_dir.path()), &mut NoObserver).unwrap();
    let full_ckpt = load_checkpoint(&full_dir.path().join(FINAL_CHECKPOINT)).unwrap();

    let (_, _, mut first) = setup(&["train.epochs=1"]);
    let dir = tempfile::tempdir().unwrap();
    train(&mut first, &corpus, Some(dir.path()), &mut NoObserver).unwrap();
    let mid = load_checkpoint(&dir.path().join("checkpoint-epoch0001.safetensors")).unwrap();
    let mut resumed = TrainState::from_checkpoint(&mid, DType::F32).unwrap();
    assert_eq!(resumed.step, first.step);
    assert_eq!(resumed.optimizer.steps(), first.optimizer.steps());
    resumed.config.train.epochs = 2;
    train(&mut resumed, &corpus, Some(dir.path()), &mut NoObserver).unwrap();
    let resumed_ckpt = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();

    assert_eq!(resumed_ckpt.step, full_ckpt.step);
    assert_eq!(resumed_ckpt.optimizer_steps, full_ckpt.optimizer_steps);
    assert_eq!(resumed_ckpt.config_text, full_ckpt.config_text);
    let log = read_log(&dir.path().join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
    assert_eq!(steps, (0..full_ckpt.step).collect::<Vec<_>>());
}

#[test]
fn total_loss_decreases_over_200_steps() {
    let mut drops: Vec<f64> = (0..3)
        .map(|seed| {
            let seed = format!("train.seed={seed}");
            let (_, corpus, mut state) = setup(&["train.epochs=200", "train.steps_per_epoch=1", &seed]);
            let records = train(&mut state, &corpus, None, &mut NoObserver).unwrap().records;
            assert_eq!(records.len(), 200);
            let mean = |r: &[rasa_core::trainer::LogRecord]| r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64;
            mean(&records[..20]) - mean(&records[180..])
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "loss drops {drops:?}");
}

#[test]
fn strong_only_never_draws_weak_pairs() {
    let (_, corpus, mut state) = setup(&["train.positive_mode=\"strong_only\"", "train.p_weak=0.9"]);
    let records = train(&mut state, &corpus, None, &mut NoObserver).unwrap().records;
    assert!(records.iter().all(|r| r.weak_pairs == 0));
    let (_, corpus, mut state) = setup(&["train.p_weak=0.9"]);
    let records = train(&mut state, &corpus, None, &mut NoObserver).unwrap().records;
    assert!(records.iter().any(|r| r.weak_pairs > 0));
}

#[test]
fn single_cell_grid_equals_plain_train_and_eval() {
    let held_out = ["corpus.n_identities=6", "corpus.test_identities=2", "train.epochs=1"];
    let (cfg, corpus, _) = setup(&held_out);
    let variant = AblationVariant::new("CL+RA", &["train.enable_mlm=false", "train.rtd_generator=\"off\""]);
    let rows = ablate(&cfg, std::slice::from_ref(&variant), &[7], &corpus, None).unwrap();
    assert_eq!(rows.len(), 1);

    let plain = variant.apply(&cfg, 7).unwrap();
    let mut state = TrainState::new(&plain, &corpus, DType::F32).unwrap();
    train(&mut state, &corpus, None, &mut NoObserver).unwrap();
    let opts = plain.eval.rank_options(plain.train.enable_itm);
    let eval = evaluate_retrieval(&state.online_model().unwrap(), &corpus, Split::Test, &opts).unwrap();
    let row = &rows[0];
    assert_eq!(row.fingerprint, plain.fingerprint().unwrap());
    assert_eq!((row.steps, row.reranked), (state.step, true));
    assert_eq!((row.r1, row.r5, row.r10, row.map), (eval.metrics.r1, eval.metrics.r5, eval.metrics.r10, eval.metrics.map));
}

#[test]
fn every_parameter_receives_gradient_at_init() {
    let cfg = config(&["train.p_weak=0.5"]);
    let corpus = generate_corpus(&cfg.corpus).unwrap();
    let state = TrainState::new(&cfg, &corpus, DType::F64).unwrap();
    let mut rng = step_rng(0, 0);
    let batch = state.batch_for_step(&corpus, 0, &mut rng).unwrap();
    let step = state.loss_terms(&corpus, &batch, &mut rng, &mut NoObserver).unwrap();
    let grads = step.terms.total(&cfg.train.weights()).unwrap().backward().unwrap();
    for (name, var) in state.params.iter() {
        let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name} has no gradient"));
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(norm > 0.0, "{name} has a zero gradient");
    }
}
