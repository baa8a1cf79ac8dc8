use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use cpt_core::batching::MaskingConfig;
use cpt_core::model::{load_checkpoint, load_checkpoint_with, save_checkpoint, truncate as truncate_ckpt, Model};
use cpt_core::tokenizer::Vocab;
use cpt_core::training::{
    loss_log_csv, run_stage_plan, Objective, PretrainData, StageInput, StagePlan,
};
use serde::Serialize;

use crate::manifest::{sidecar, RunManifest};
use crate::options::{create_dir, read_lines, set, write_text, ModelArgs, OptimArgs};
use crate::UsageError;

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Vocabulary file; fixes the embedding size
    #[arg(long, conflicts_with = "vocab_size")]
    pub vocab: Option<PathBuf>,
    /// Vocabulary size when no vocabulary file is given
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint to write
    #[arg(long = "out")]
    pub output: PathBuf,
}

pub fn init(a: InitArgs, seed: Option<u64>) -> Result<()> {
    let vocab_size = match (&a.vocab, a.vocab_size) {
        (Some(p), _) => Vocab::load(p)?.len(),
        (None, Some(n)) => n,
        (None, None) => return Err(UsageError("init needs --vocab or --vocab-size".into()).into()),
    };
    let cfg = a.model.resolve(vocab_size)?;
    let seed = seed.unwrap_or(0);
    let mut m = RunManifest::new("init", Some(seed), &cfg)?;
    if let Some(p) = &a.vocab {
        m.input(p)?;
    }
    if let Some(p) = &a.model.model_config {
        m.input(p)?;
    }
    let model = Model::<f32>::init(&cfg, seed)?;
    let ckpt = model.to_checkpoint().with_meta("init_seed", seed);
    save_checkpoint(&ckpt, &a.output)?;
    println!("{}: {} parameters", a.output.display(), ckpt.num_parameters());
    m.output(&a.output);
    m.write(&sidecar(&a.output))
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Stage plan (TOML, one [[stage]] table per stage)
    #[arg(long)]
    pub plan: PathBuf,
    /// Vocabulary file
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint to continue from
    #[arg(long, required_unless_present = "from_scratch", conflicts_with = "from_scratch")]
    pub init: Option<PathBuf>,
    /// Start from a random initialization shaped by the model flags
    #[arg(long)]
    pub from_scratch: bool,
    /// Output directory: <tag>.ckpt and <tag>.loss.csv per stage
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Linear warmup steps [default: 10000]
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    /// Steps per stage [default: 100000]
    #[arg(long)]
    pub total_steps: Option<usize>,
    /// Steps between validation evaluations [default: 1000]
    #[arg(long)]
    pub validation_every: Option<usize>,
    /// Evaluations without improvement before stopping [default: 3]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Share of each stage's data held out for validation [default: 0.01]
    #[arg(long)]
    pub held_out_fraction: Option<f64>,
}

#[derive(Debug, Serialize)]
struct PretrainSnapshot<'a> {
    model: &'a cpt_core::model::ModelConfig,
    masking: MaskingConfig,
    plan: &'a StagePlan,
}

#[derive(Debug, Serialize)]
struct StageSummary {
    tag: String,
    items: usize,
    steps_run: usize,
    stopped_early: bool,
    initial_val_loss: f64,
    best_val_loss: f64,
    best_step: usize,
    checkpoint: PathBuf,
    loss_log: PathBuf,
}

fn stage_data(objective: Objective, corpora: &[PathBuf], vocab: &Vocab) -> Result<PretrainData> {
    match objective {
        Objective::Mlm => {
            let mut out = Vec::new();
            for p in corpora {
                out.extend(read_lines(p)?.iter().map(|l| vocab.encode(l)).filter(|ids| !ids.is_empty()));
            }
            Ok(PretrainData::Mlm(out))
        }
        Objective::Tlm => {
            let mut out = Vec::new();
            for p in corpora {
                for (i, l) in read_lines(p)?.iter().enumerate() {
                    let (s, t) = l.split_once('\t').filter(|(_, t)| !t.contains('\t')).ok_or_else(|| {
                        cpt_core::Error::Data(format!(
                            "{}: line {} is not source<TAB>target",
                            p.display(),
                            i + 1
                        ))
                    })?;
                    let (s, t) = (vocab.encode(s), vocab.encode(t));
                    if !s.is_empty() && !t.is_empty() {
                        out.push((s, t));
                    }
                }
            }
            Ok(PretrainData::Tlm(out))
        }
    }
}

pub fn pretrain(a: PretrainArgs, seed: Option<u64>) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let mut plan = StagePlan::load(&a.plan)?;
    for s in &mut plan.stages {
        a.optim.apply(&mut s.train);
        set(&mut s.train.warmup_steps, a.warmup_steps);
        set(&mut s.train.total_steps, a.total_steps);
        set(&mut s.train.validation_every, a.validation_every);
        set(&mut s.train.patience, a.patience);
        set(&mut s.train.held_out_fraction, a.held_out_fraction);
        set(&mut s.train.seed, seed);
    }
    plan.validate()?;

    let (init, init_source) = match &a.init {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            if ckpt.config.vocab_size != vocab.len() {
                return Err(cpt_core::Error::Config(format!(
                    "{} has vocab_size {} but {} holds {} tokens",
                    p.display(),
                    ckpt.config.vocab_size,
                    a.vocab.display(),
                    vocab.len()
                ))
                .into());
            }
            (Model::<f32>::from_checkpoint(&ckpt)?, Some(p.clone()))
        }
        None => {
            let cfg = a.model.resolve(vocab.len())?;
            (Model::<f32>::init(&cfg, seed.unwrap_or(0))?, None)
        }
    };
    let masking = MaskingConfig {
        seed: seed.unwrap_or(0),
        ..MaskingConfig::default()
    };

    let mut m = RunManifest::new(
        "pretrain",
        seed,
        PretrainSnapshot {
            model: &init.config,
            masking,
            plan: &plan,
        },
    )?;
    m.input(&a.plan)?;
    m.input(&a.vocab)?;
    if let Some(p) = &init_source {
        m.input(p)?;
    }
    if let Some(p) = &a.model.model_config {
        m.input(p)?;
    }

    let mut stages = Vec::new();
    for s in &plan.stages {
        for c in &s.corpora {
            m.input(c)?;
        }
        let data = stage_data(s.objective, &s.corpora, &vocab)
            .with_context(|| format!("loading data for stage `{}`", s.tag))?;
        stages.push(StageInput {
            tag: s.tag.clone(),
            objective: s.objective,
            data,
            train: s.train.clone(),
        });
    }

    create_dir(&a.out_dir)?;
    let results = run_stage_plan(&stages, init, &vocab, &masking)?;
    let mut summaries = Vec::new();
    for r in &results {
        let ckpt_path = a.out_dir.join(format!("{}.ckpt", r.tag));
        let mut ckpt = r.model.to_checkpoint().with_meta("stage", &r.tag);
        if let Some(o) = &r.outcome {
            ckpt = ckpt
                .with_meta("best_step", o.best_step)
                .with_meta("best_val_loss", o.best_val_loss);
        }
        save_checkpoint(&ckpt, &ckpt_path)?;
        m.output(&ckpt_path);
        let Some(o) = &r.outcome else { continue };
        let log_path = a.out_dir.join(format!("{}.loss.csv", r.tag));
        write_text(&log_path, &loss_log_csv(&o.log))?;
        m.output(&log_path);
        let items = stages.iter().find(|s| s.tag == r.tag).map_or(0, |s| s.data.len());
        println!(
            "stage {}: {} steps, val loss {:.4} -> {:.4} (best at step {}){}",
            r.tag,
            o.steps_run,
            o.initial_val_loss(),
            o.best_val_loss,
            o.best_step,
            if o.stopped_early { ", stopped early" } else { "" }
        );
        summaries.push(StageSummary {
            tag: r.tag.clone(),
            items,
            steps_run: o.steps_run,
            stopped_early: o.stopped_early,
            initial_val_loss: o.initial_val_loss(),
            best_val_loss: o.best_val_loss,
            best_step: o.best_step,
            checkpoint: ckpt_path,
            loss_log: log_path,
        });
    }
    m.results(&summaries)?;
    m.write(&a.out_dir.join("manifest.json"))
}

#[derive(Debug, Args)]
pub struct TruncateArgs {
    /// Checkpoint to read
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Number of leading layers to keep
    #[arg(long)]
    pub keep_layers: usize,
    /// Checkpoint to write
    #[arg(long = "out")]
    pub output: PathBuf,
}

#[derive(Debug, Serialize)]
struct TruncateSnapshot {
    keep_layers: usize,
}

pub fn truncate(a: TruncateArgs) -> Result<()> {
    let mut m = RunManifest::new(
        "truncate",
        None,
        TruncateSnapshot {
            keep_layers: a.keep_layers,
        },
    )?;
    m.input(&a.input)?;
    let ckpt = load_checkpoint(&a.input)?;
    let out = truncate_ckpt(&ckpt, a.keep_layers)?;
    save_checkpoint(&out, &a.output)?;
    println!(
        "{}: {} -> {} layers, {} parameters",
        a.output.display(),
        ckpt.config.num_layers,
        out.config.num_layers,
        out.num_parameters()
    );
    m.output(&a.output);
    m.write(&sidecar(&a.output))
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to describe
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Also reject checkpoints holding NaN or infinite values
    #[arg(long)]
    pub strict: bool,
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint_with(&a.input, a.strict)?;
    print!("{}", ckpt.describe());
    Ok(())
}
