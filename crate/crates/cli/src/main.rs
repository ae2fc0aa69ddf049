use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use tsfp_core::training::AblationMode;

mod commands;
mod config;
mod manifest;

use commands::FinetuneArgs;
use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

/// Fingerprint-token pre-training, fine-tuning, probing and theory checks.
#[derive(Debug, Parser)]
#[command(name = "tsfp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run configuration; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Re-run even if the output directory already holds this run.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ReadArgs {
    /// Directory written by `finetune` (or `pretrain`).
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `generate-data`.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Scratch,
    Rec,
    #[value(name = "rec_div")]
    RecDiv,
}

impl From<Mode> for AblationMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Scratch => AblationMode::Scratch,
            Mode::Rec => AblationMode::RecOnly,
            Mode::RecDiv => AblationMode::RecPlusDiv,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the full default configuration.
    DefaultConfig,
    /// Generate the synthetic motif dataset (train/val/test files).
    GenerateData {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Pre-train encoder and decoder on the unlabeled train split.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Directory written by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.mode` from the config.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Fine-tune with attention pooling and report test metrics.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Directory written by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.mode` from the config.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Output directory of a `pretrain` run; required unless the mode is scratch.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train only the pooling query and classifier.
        #[arg(long)]
        freeze_encoder: bool,
        /// Fine-tune on this many labeled samples per class.
        #[arg(long)]
        labels_per_class: Option<usize>,
    },
    /// Compute metrics of a trained model on one split.
    Evaluate {
        #[command(flatten)]
        read: ReadArgs,
    },
    /// Run every theory oracle and write a JSON verdict bundle.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the sign of the total-correlation check; the run must fail.
        #[arg(long)]
        canary: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Write pooling weights and token attention maps as CSV.
    Probe {
        #[command(flatten)]
        read: ReadArgs,
    },
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(0)
        }
        Command::GenerateData { run } => {
            let cfg = RunConfig::load(run.config.as_deref())?.resolve(run.seed, None)?;
            commands::generate_data(cfg, &run.out, run.force)
        }
        Command::Pretrain { run, data, mode } => {
            let cfg = RunConfig::load(run.config.as_deref())?.resolve(run.seed, mode.map(Into::into))?;
            commands::pretrain_cmd(cfg, &data, &run.out, run.force)
        }
        Command::Finetune {
            run,
            data,
            mode,
            checkpoint,
            freeze_encoder,
            labels_per_class,
        } => {
            let mut cfg = RunConfig::load(run.config.as_deref())?.resolve(run.seed, mode.map(Into::into))?;
            cfg.train.freeze_encoder |= freeze_encoder;
            let args = FinetuneArgs {
                checkpoint,
                labels_per_class,
            };
            commands::finetune_cmd(cfg, &data, &run.out, args, run.force)
        }
        Command::Evaluate { read } => commands::evaluate_cmd(&read.model, &read.data, read.split.name(), &read.out, read.force),
        Command::VerifyTheory {
            seed,
            canary,
            out,
            force,
        } => commands::verify_theory(seed, canary, &out, force),
        Command::Probe { read } => commands::probe_cmd(&read.model, &read.data, read.split.name(), &read.out, read.force),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("tsfp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
