use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::DType;
use rasa_core::corpus::load_corpus;
use rasa_core::eval::evaluate_state;
use rasa_core::trainer::{load_checkpoint, TrainState};
use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = r#"
[corpus]
n_identities = 12
test_identities = 8
images_per_identity = 2
texts_per_image = 2

[model]
image_layers = 1
text_layers = 1
cross_layers = 1
hidden_dim = 16
heads = 2
mlp_ratio = 2
proj_dim = 8

[train]
batch_size = 4
queue_size = 16
epochs = 1
"#;

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, TINY).unwrap();
        Self { dir, config }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn rasa(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_rasa"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .env("RASA_OUTPUT_ROOT", self.root())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    /// Runs and expects success; returns the stdout summary.
    fn ok(&self, args: &[&str]) -> Value {
        let out = self.rasa(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    /// Runs and expects failure; returns the exit code and the error record.
    fn err(&self, args: &[&str]) -> (i32, Value) {
        let out = self.rasa(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        let stderr = String::from_utf8_lossy(&out.stderr);
        let record = stderr.lines().rev().find_map(|l| serde_json::from_str::<Value>(l).ok()).unwrap();
        (out.status.code().unwrap(), record)
    }
}

/// Same scheme as the library, written out independently: per file, its name,
/// its byte length as little-endian u64, then its bytes.
fn rehash(dir: &Path) -> String {
    let mut h = Sha256::new();
    for name in ["manifest.jsonl", "pixels.bin", "vocab.json"] {
        let bytes = std::fs::read(dir.join(name)).unwrap();
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

fn file_bytes(dir: &Path) -> Vec<Vec<u8>> {
    ["manifest.jsonl", "pixels.bin", "vocab.json"].iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect()
}

#[test]
fn gen_data_refuses_to_overwrite_and_reproduces_with_force() {
    let ws = Workspace::new();
    let nested = "deep/er/corpus";
    let first = ws.ok(&["gen-data", "--set", &format!("paths.corpus={nested}")]);
    assert!(ws.root().join(nested).join("manifest.jsonl").is_file());
    let before = file_bytes(&ws.root().join(nested));

    let (code, record) = ws.err(&["gen-data", "--set", &format!("paths.corpus={nested}")]);
    assert_eq!(code, 3);
    assert_eq!(record["kind"], "data");
    assert_eq!(file_bytes(&ws.root().join(nested)), before);

    let again = ws.ok(&["gen-data", "--force", "--set", &format!("paths.corpus={nested}")]);
    assert_eq!(first["fingerprint"], again["fingerprint"]);
    assert_eq!(file_bytes(&ws.root().join(nested)), before);
}

#[test]
fn fingerprint_matches_an_independent_rehash() {
    let ws = Workspace::new();
    let out = ws.ok(&["gen-data"]);
    assert_eq!(out["fingerprint"].as_str().unwrap(), rehash(&ws.root().join("corpus")));

    let other = ws.ok(&["gen-data", "--set", "corpus.seed=7", "--set", "paths.corpus=other"]);
    assert_ne!(other["fingerprint"], out["fingerprint"]);
}

#[test]
fn manifests_precede_outputs_and_echo_the_config() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    let gen: Value =
        serde_json::from_slice(&std::fs::read(ws.root().join("corpus/gen_data_manifest.json")).unwrap()).unwrap();
    assert_eq!(gen["corpus_fingerprint"], Value::Null);
    assert!(gen["config"]["source"].as_str().unwrap().contains("n_identities = 12"));

    ws.ok(&["train", "--set", "train.seed=3"]);
    let m: Value = serde_json::from_slice(&std::fs::read(ws.root().join("run/train_manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["corpus_fingerprint"].as_str().unwrap(), rehash(&ws.root().join("corpus")));
    assert!(m["config"]["source"].as_str().unwrap().ends_with("# --set train.seed=3\n"));
    assert!(m["config"]["effective"].as_str().unwrap().contains("seed = 3"));
    assert!(m["started_at"].as_f64().unwrap() > 0.0);
    assert_eq!(
        PathBuf::from(m["outputs"]["final_checkpoint"].as_str().unwrap()),
        ws.root().join("run/final.safetensors")
    );
    assert!(m["version"].is_string());

    let ckpt = load_checkpoint(&ws.root().join("run/final.safetensors")).unwrap();
    assert_eq!(ckpt.config_source.as_deref(), m["config"]["source"].as_str());
}

#[test]
fn train_then_eval_round_trips_through_checkpoint_files() {
    let ws = Workspace::new();
    let corpus_dir = ws.root().join("corpus");
    ws.ok(&["gen-data"]);
    let before = file_bytes(&corpus_dir);
    let trained = ws.ok(&["train", "--set", "train.epochs=2"]);
    assert_eq!(trained["steps"], 8);
    let summary = ws.ok(&["eval"]);
    assert_eq!(file_bytes(&corpus_dir), before, "commands must not touch their input corpus");

    let out = ws.root().join("run/eval-test");
    let metrics: Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["r1"], summary["r1"]);
    let report: Value = serde_json::from_slice(&std::fs::read(out.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["metrics"], metrics);

    // 8 test identities x 2 images x 2 texts: 32 queries over a 16-image gallery.
    let tsv = std::fs::read_to_string(out.join("rankings.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 32 * 16);

    // The library evaluating the same checkpoint in-process agrees.
    let corpus = load_corpus(&corpus_dir).unwrap();
    let ckpt = load_checkpoint(&ws.root().join("run/final.safetensors")).unwrap();
    assert_eq!(ckpt.step, 8);
    let state = TrainState::from_checkpoint(&ckpt, DType::F32).unwrap();
    let (direct, _) = evaluate_state(&state, &corpus, &ckpt.config.eval).unwrap();
    // JSON text keeps 17 significant digits; the parse back may move the last ulp.
    for key in ["r1", "r5", "r10", "mAP"] {
        let direct = serde_json::to_value(&direct.metrics).unwrap()[key].as_f64().unwrap();
        assert!((direct - metrics[key].as_f64().unwrap()).abs() < 1e-12, "{key}");
    }
    let direct_ap = &direct.metrics.per_query_ap;
    let file_ap: Vec<f64> = serde_json::from_value(metrics["per_query_ap"].clone()).unwrap();
    assert_eq!(direct_ap.len(), file_ap.len());
    assert!(direct_ap.iter().zip(&file_ap).all(|(a, b)| (a - b).abs() < 1e-12));

    let embedded = ws.ok(&["embed"]);
    let lines = std::fs::read_to_string(embedded["embeddings"].as_str().unwrap()).unwrap();
    let records: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 16 + 32);
    for r in &records {
        let v: Vec<f64> = serde_json::from_value(r["vector"].clone()).unwrap();
        assert_eq!(v.len(), 8);
        assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-4);
    }
}

#[test]
fn resume_extends_a_run_and_rejects_changed_settings() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--set", "train.epochs=1"]);
    let resumed = ws.ok(&["train", "--set", "train.epochs=2", "--resume", "run/checkpoint-epoch0001.safetensors"]);
    assert_eq!(resumed["start_step"], 4);
    assert_eq!(resumed["steps"], 8);
    assert!(ws.root().join("run/train_manifest.1.json").is_file());

    let (code, record) = ws.err(&["train", "--set", "train.lr_heads=0.5", "--resume", "run/final.safetensors"]);
    assert_eq!(code, 2);
    assert!(record["message"].as_str().unwrap().contains("train.lr_heads"));
}

#[test]
fn untrained_eval_is_near_the_random_baseline() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--set", "train.epochs=0"]);
    let m = ws.ok(&["eval"]);
    // Random ranking puts a relevant image first with probability 2/16 = 1/8 per query;
    // 32 queries give a standard deviation of 100 * sqrt(p(1-p)/32) percentage points.
    let p = 1.0 / 8.0;
    let sd = 100.0 * (p * (1.0 - p) / 32.0_f64).sqrt();
    let r1 = m["r1"].as_f64().unwrap();
    assert!((r1 - 100.0 * p).abs() <= 4.0 * sd, "R@1 {r1} vs baseline {}", 100.0 * p);
}

#[test]
fn ablate_emits_one_row_per_standard_variant() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    let out = ws.ok(&["ablate", "--grid", "standard", "--seeds", "4"]);
    assert_eq!(out["rows"].as_array().unwrap().len(), 3);
    let mut reader = csv::Reader::from_path(ws.root().join("run/ablation/ablation.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(names, ["CL", "CL+RA", "CL+RA+SA"]);
    assert!(rows.iter().all(|r| r.get(1) == Some("4")));
}

#[test]
fn failures_exit_with_their_class_and_a_json_record() {
    let ws = Workspace::new();

    let (code, record) = ws.err(&["gen-data", "--set", "train.no_such_key=1"]);
    assert_eq!(code, 2);
    assert_eq!(record["kind"], "config");
    assert!(record["message"].as_str().unwrap().contains("train.no_such_key"));
    assert!(!ws.root().join("corpus").exists(), "nothing is computed after a config error");

    let (code, record) = ws.err(&["train"]);
    assert_eq!(code, 3);
    assert_eq!(record["command"], "train");

    ws.ok(&["gen-data"]);
    let (code, _) = ws.err(&["eval"]);
    assert_eq!(code, 3, "eval without a checkpoint");

    let (code, _) = ws.err(&["train", "--set", "corpus.seed=99"]);
    assert_eq!(code, 3, "corpus generated from a different spec");

    let (code, record) =
        ws.err(&["train", "--set", "train.lr_heads=1e30", "--set", "train.lr_backbone=1e30", "--set", "train.epochs=3"]);
    assert_eq!(code, 4);
    assert_eq!(record["kind"], "numeric");
    let dumps = std::fs::read_dir(ws.root().join("run"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("failure-step"))
        .count();
    assert_eq!(dumps, 1);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        rasa_core::trainer::RunConfig::parse(&text, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
