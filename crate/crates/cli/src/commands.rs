use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::DType;
use rasa_core::corpus::{
    corpus_fingerprint, generate_corpus, load_corpus, save_corpus, Corpus, MANIFEST_FILE, PIXELS_FILE, VOCAB_FILE,
};
use rasa_core::eval::evaluate_state;
use rasa_core::retrieval::{embed_gallery, embed_texts, write_rankings_tsv};
use rasa_core::trainer::{
    ablate, extended_grid, load_checkpoint, standard_grid, train, write_ablation_table, Checkpoint, NoObserver,
    RunConfig, TrainState, FINAL_CHECKPOINT, TRAIN_LOG,
};
use rasa_core::{Error, Result};
use serde_json::{json, Value};

use crate::manifest::{ConfigEcho, RunManifest};
use crate::{Cli, Command, Grid};

struct Context {
    config: RunConfig,
    echo: ConfigEcho,
    root: PathBuf,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self> {
        let text = match &cli.config {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?,
            None => String::new(),
        };
        let config = RunConfig::parse(&text, &cli.overrides)?;
        let mut source = text;
        for o in &cli.overrides {
            if !source.is_empty() && !source.ends_with('\n') {
                source.push('\n');
            }
            source.push_str(&format!("# --set {o}\n"));
        }
        let echo = ConfigEcho {
            effective: config.to_toml()?,
            source,
        };
        Ok(Self {
            config,
            echo,
            root: cli.output_root.clone(),
        })
    }

    fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.corpus)
    }

    fn run_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.run)
    }

    fn checkpoint_path(&self) -> PathBuf {
        if self.config.paths.checkpoint.is_empty() {
            self.run_dir().join(FINAL_CHECKPOINT)
        } else {
            self.resolve(&self.config.paths.checkpoint)
        }
    }

    fn manifest(&self, command: &str, fingerprint: Option<String>) -> RunManifest {
        RunManifest::new(command, self.echo.clone(), fingerprint)
    }

    /// Loads the configured corpus and checks it was generated from the `[corpus]` section in force.
    fn corpus(&self) -> Result<(Corpus, String)> {
        let dir = self.corpus_dir();
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(Error::Data(format!("no corpus at {}; run gen-data first", dir.display())));
        }
        let corpus = load_corpus(&dir)?;
        if corpus.spec != self.config.corpus {
            return Err(Error::Data(format!(
                "corpus at {} was generated from a different [corpus] section",
                dir.display()
            )));
        }
        let fingerprint = corpus_fingerprint(&dir)?;
        Ok((corpus, fingerprint))
    }

    fn checkpoint(&self, path: &Path, corpus: &Corpus) -> Result<Checkpoint> {
        if !path.is_file() {
            return Err(Error::Data(format!("no checkpoint at {}", path.display())));
        }
        let ckpt = load_checkpoint(path)?;
        if ckpt.config.corpus != corpus.spec {
            return Err(Error::Data(format!(
                "checkpoint {} was trained on a different corpus",
                path.display()
            )));
        }
        Ok(ckpt)
    }
}

fn split_name(ctx: &Context) -> String {
    match serde_json::to_value(ctx.config.eval.split) {
        Ok(Value::String(s)) => s,
        _ => format!("{:?}", ctx.config.eval.split).to_lowercase(),
    }
}

pub fn run(cli: &Cli) -> Result<Value> {
    let ctx = Context::load(cli)?;
    match &cli.command {
        Command::GenData { force } => gen_data(&ctx, *force),
        Command::Train { resume } => train_cmd(&ctx, resume.as_deref()),
        Command::Eval => eval_cmd(&ctx),
        Command::Embed => embed_cmd(&ctx),
        Command::Ablate { grid, seeds } => ablate_cmd(&ctx, *grid, seeds),
    }
}

fn gen_data(ctx: &Context, force: bool) -> Result<Value> {
    let dir = ctx.corpus_dir();
    let existing = [MANIFEST_FILE, PIXELS_FILE, VOCAB_FILE].iter().any(|f| dir.join(f).exists());
    if existing && !force {
        return Err(Error::Data(format!(
            "a corpus already exists at {}; pass --force to replace it",
            dir.display()
        )));
    }
    let manifest = ctx.manifest("gen-data", None).output("corpus", &dir).write(&dir)?;
    let corpus = generate_corpus(&ctx.config.corpus)?;
    save_corpus(&corpus, &dir)?;
    Ok(json!({
        "corpus": dir,
        "fingerprint": corpus_fingerprint(&dir)?,
        "identities": corpus.identities.len(),
        "images": corpus.images.len(),
        "texts": corpus.texts.len(),
        "manifest": manifest,
    }))
}

/// Keys of `[model]` and `[train]` that differ between `a` and `b`, as `section.key`.
fn differing_keys(a: &RunConfig, b: &RunConfig) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (section, x, y) in [
        ("model", serde_json::to_value(&a.model)?, serde_json::to_value(&b.model)?),
        ("train", serde_json::to_value(&a.train)?, serde_json::to_value(&b.train)?),
    ] {
        if let (Value::Object(x), Value::Object(y)) = (x, y) {
            out.extend(x.iter().filter(|(k, v)| y.get(*k) != Some(v)).map(|(k, _)| format!("{section}.{k}")));
        }
    }
    Ok(out)
}

/// A resumed run may change its step budget and checkpoint cadence, nothing else that shapes training.
fn resumable(ckpt: &Checkpoint, config: &RunConfig) -> Result<()> {
    let mut expected = ckpt.config.clone();
    expected.train.epochs = config.train.epochs;
    expected.train.max_steps = config.train.max_steps;
    expected.train.checkpoint_every = config.train.checkpoint_every;
    let differing = differing_keys(&expected, config)?;
    if differing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "resume configuration differs from the checkpoint at {}",
            differing.join(", ")
        )))
    }
}

fn train_cmd(ctx: &Context, resume: Option<&Path>) -> Result<Value> {
    let (corpus, fingerprint) = ctx.corpus()?;
    let run_dir = ctx.run_dir();
    let mut state = match resume {
        Some(path) => {
            let path = ctx.resolve(path);
            let ckpt = ctx.checkpoint(&path, &corpus)?;
            resumable(&ckpt, &ctx.config)?;
            let mut state = TrainState::from_checkpoint(&ckpt, DType::F32)?;
            state.config.train.epochs = ctx.config.train.epochs;
            state.config.train.max_steps = ctx.config.train.max_steps;
            state.config.train.checkpoint_every = ctx.config.train.checkpoint_every;
            state
        }
        None => TrainState::new(&ctx.config, &corpus, DType::F32)?,
    };
    state.config_source = Some(ctx.echo.source.clone());
    let final_path = run_dir.join(FINAL_CHECKPOINT);
    let mut manifest = ctx
        .manifest("train", Some(fingerprint))
        .output("run", &run_dir)
        .output("log", &run_dir.join(TRAIN_LOG))
        .output("final_checkpoint", &final_path);
    if let Some(path) = resume {
        manifest = manifest.output("resumed_from", &ctx.resolve(path));
    }
    let manifest = manifest.write(&run_dir)?;
    let start = state.step;
    let summary = train(&mut state, &corpus, Some(&run_dir), &mut NoObserver)?;
    Ok(json!({
        "run": run_dir,
        "start_step": start,
        "steps": state.step,
        "final_loss": summary.records.last().map(|r| r.loss.total),
        "final_checkpoint": summary.final_checkpoint,
        "log": summary.log,
        "manifest": manifest,
    }))
}

fn eval_cmd(ctx: &Context) -> Result<Value> {
    let (corpus, fingerprint) = ctx.corpus()?;
    let ckpt_path = ctx.checkpoint_path();
    let ckpt = ctx.checkpoint(&ckpt_path, &corpus)?;
    let out = ctx.run_dir().join(format!("eval-{}", split_name(ctx)));
    let (metrics_path, rankings_path, report_path) =
        (out.join("metrics.json"), out.join("rankings.tsv"), out.join("eval_report.json"));
    let manifest = ctx
        .manifest("eval", Some(fingerprint))
        .output("checkpoint", &ckpt_path)
        .output("metrics", &metrics_path)
        .output("rankings", &rankings_path)
        .output("report", &report_path)
        .write(&out)?;
    let state = TrainState::from_checkpoint(&ckpt, DType::F32)?;
    let (report, rankings) = evaluate_state(&state, &corpus, &ctx.config.eval)?;
    serde_json::to_writer_pretty(File::create(&metrics_path)?, &report.metrics)?;
    write_rankings_tsv(&rankings_path, &rankings)?;
    serde_json::to_writer_pretty(File::create(&report_path)?, &report)?;
    Ok(json!({
        "split": report.split,
        "reranked": report.reranked,
        "r1": report.metrics.r1,
        "r5": report.metrics.r5,
        "r10": report.metrics.r10,
        "mAP": report.metrics.map,
        "relation_accuracy": report.relation.accuracy,
        "replaced_recall": report.replacement.as_ref().map(|r| r.replaced_recall),
        "out": out,
        "manifest": manifest,
    }))
}

fn embed_cmd(ctx: &Context) -> Result<Value> {
    let (corpus, fingerprint) = ctx.corpus()?;
    let ckpt_path = ctx.checkpoint_path();
    let ckpt = ctx.checkpoint(&ckpt_path, &corpus)?;
    let run_dir = ctx.run_dir();
    let path = run_dir.join(format!("embeddings-{}.jsonl", split_name(ctx)));
    let manifest = ctx
        .manifest("embed", Some(fingerprint))
        .output("checkpoint", &ckpt_path)
        .output("embeddings", &path)
        .write(&run_dir)?;
    let model = TrainState::from_checkpoint(&ckpt, DType::F32)?.online_model()?;
    let split = ctx.config.eval.split;
    let image_ids = corpus.image_ids(split);
    let text_ids = corpus.text_ids(split);
    let images = embed_gallery(&model, &corpus, &image_ids)?;
    let texts = embed_texts(&model, &corpus, &text_ids)?;
    let mut w = BufWriter::new(File::create(&path)?);
    for (i, &id) in image_ids.iter().enumerate() {
        let rec = json!({
            "kind": "image",
            "id": id,
            "identity_id": corpus.image(id).identity_id,
            "vector": images.vectors[i],
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    for (&id, v) in text_ids.iter().zip(&texts) {
        let t = corpus.text(id);
        let rec = json!({
            "kind": "text",
            "id": id,
            "identity_id": t.identity_id,
            "source_image_id": t.source_image_id,
            "vector": v,
        });
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(json!({
        "embeddings": path,
        "images": image_ids.len(),
        "texts": text_ids.len(),
        "manifest": manifest,
    }))
}

fn ablate_cmd(ctx: &Context, grid: Grid, seeds: &[u64]) -> Result<Value> {
    let (corpus, fingerprint) = ctx.corpus()?;
    let out = ctx.run_dir().join("ablation");
    let table = out.join("ablation.csv");
    let manifest = ctx
        .manifest("ablate", Some(fingerprint))
        .output("runs", &out)
        .output("table", &table)
        .write(&out)?;
    let variants = match grid {
        Grid::Standard => standard_grid(),
        Grid::Extended => extended_grid(),
    };
    let rows = ablate(&ctx.config, &variants, seeds, &corpus, Some(&out))?;
    write_ablation_table(&table, &rows)?;
    Ok(json!({
        "table": table,
        "rows": rows,
        "manifest": manifest,
    }))
}
