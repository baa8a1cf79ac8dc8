//! `cpt`: corpus preparation, staged continual pretraining, and task
//! fine-tuning for BERT-style encoders.

mod manifest;
mod options;
mod prep;
mod tasks;
mod train;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cpt", version, about = "Continual pretraining pipeline for BERT-style encoders")]
struct Cli {
    /// Seed for every random choice in the run. Overrides seeds given in
    /// config files [default: the config value, else 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log level: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean a raw corpus (one sentence per line, or source<TAB>target)
    Clean(prep::CleanArgs),
    /// Remove sentences dominated by repeated word windows
    Dedup(prep::DedupArgs),
    /// Train or apply a WordPiece vocabulary
    #[command(subcommand)]
    Tokenizer(prep::TokenizerCommand),
    /// Print masked training examples for inspection
    DumpExamples(prep::DumpArgs),
    /// Write a randomly initialized checkpoint
    Init(train::InitArgs),
    /// Run a staged pretraining plan
    Pretrain(train::PretrainArgs),
    /// Keep only the first layers of a checkpoint
    Truncate(train::TruncateArgs),
    /// Print a checkpoint's header and tensor manifest
    InspectCheckpoint(train::InspectArgs),
    /// Fine-tune a checkpoint on one registered task
    Finetune(tasks::FinetuneArgs),
    /// Fine-tune and score every task found in a data directory
    Benchmark(tasks::BenchmarkArgs),
}

/// Bad flag combinations or names detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Failures that have already been reported and only need an exit code.
#[derive(Debug)]
pub struct Reported {
    pub numerical: bool,
    pub message: String,
}

impl fmt::Display for Reported {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Reported {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(r) = cause.downcast_ref::<Reported>() {
            return if r.numerical { 3 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<cpt_core::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Clean(a) => prep::clean(a),
        Command::Dedup(a) => prep::dedup(a),
        Command::Tokenizer(c) => prep::tokenizer(c),
        Command::DumpExamples(a) => prep::dump_examples(a, seed),
        Command::Init(a) => train::init(a, seed),
        Command::Pretrain(a) => train::pretrain(a, seed),
        Command::Truncate(a) => train::truncate(a),
        Command::InspectCheckpoint(a) => train::inspect(a),
        Command::Finetune(a) => tasks::finetune(a, seed),
        Command::Benchmark(a) => tasks::benchmark(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
