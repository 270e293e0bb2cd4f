//! `rasa`: corpus generation, training, evaluation, embedding export and the
//! ablation grid, all driven by one TOML configuration.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rasa_core::Error;

#[derive(Debug, Parser)]
#[command(name = "rasa", version, about = "Text-to-image person retrieval on a synthetic corpus: data, training, evaluation")]
pub struct Cli {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, `section.key=value`; repeatable, applied in order after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Root that relative `[paths]` entries resolve against.
    #[arg(long, env = "RASA_OUTPUT_ROOT", default_value = ".", global = true)]
    pub output_root: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `paths.corpus`.
    GenData {
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train into `paths.run`.
    Train {
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on `eval.split`.
    Eval,
    /// Export projected image and text vectors of `eval.split` as JSON lines.
    Embed,
    /// Train and evaluate every variant of a grid under every seed.
    Ablate {
        #[arg(long, value_enum, default_value_t = Grid::Standard)]
        grid: Grid,
        /// Comma-separated seeds; each replaces `train.seed`.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Standard,
    Extended,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Embed => "embed",
            Command::Ablate { .. } => "ablate",
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Vocabulary(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::Protocol(_) => 3,
        Error::Numeric { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let command = cli.command.name();
    match commands::run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let record = serde_json::json!({
                "command": command,
                "kind": err.kind(),
                "exit_code": exit_code(&err),
                "message": err.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(exit_code(&err))
        }
    }
}
