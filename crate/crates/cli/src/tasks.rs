use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use cpt_core::eval::{
    accuracy, load_task_file, BenchmarkTable, ColumnMapping, TaskRegistry, TaskResult, TaskSpec,
};
use cpt_core::model::{load_checkpoint, save_checkpoint, Checkpoint, HeadKind, LabelValue, Model};
use cpt_core::tokenizer::Vocab;
use cpt_core::training::{finetune as run_finetune, FinetuneConfig, FinetuneExample, FinetuneOutcome};
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::options::{create_dir, read_text, set, write_text, OptimArgs};
use crate::{Reported, UsageError};

/// Fine-tuning flags shared by `finetune` and `benchmark`.
#[derive(Debug, Args)]
pub struct FinetuneFlags {
    /// Checkpoint to start from
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary file
    #[arg(long)]
    pub vocab: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Fine-tuning config (TOML with FinetuneConfig fields)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Passes over the training split [default: 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Share of fine-tuning steps used for warmup [default: 0.1]
    #[arg(long)]
    pub warmup_fraction: Option<f64>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

impl FinetuneFlags {
    fn resolve(&self, seed: Option<u64>) -> Result<FinetuneConfig> {
        let mut cfg = match &self.config {
            Some(p) => toml::from_str::<FinetuneConfig>(&read_text(p)?)
                .map_err(|e| cpt_core::Error::Config(format!("{}: {e}", p.display())))?,
            None => FinetuneConfig::default(),
        };
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.warmup_fraction, self.warmup_fraction);
        self.optim.apply(&mut cfg.train);
        set(&mut cfg.train.seed, seed);
        Ok(cfg)
    }

    fn record_inputs(&self, m: &mut RunManifest) -> Result<()> {
        m.input(&self.checkpoint)?;
        m.input(&self.vocab)?;
        if let Some(p) = &self.config {
            m.input(p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Registered task name: FID, MDD, MQ2Q, SVREG, SEC, OOLD, OHSD or XNLI
    #[arg(long)]
    pub task: String,
    /// Training split (header-bearing TSV)
    #[arg(long)]
    pub train: PathBuf,
    /// Dev split (header-bearing TSV)
    #[arg(long)]
    pub dev: PathBuf,
    /// Column mapping (TOML) for files that do not use the default columns
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[command(flatten)]
    pub flags: FinetuneFlags,
}

#[derive(Debug, Serialize)]
struct FinetuneSnapshot<'a> {
    task: &'a str,
    finetune: &'a FinetuneConfig,
    mapping: &'a ColumnMapping,
}

#[derive(Debug, Serialize)]
struct EpochSummary {
    epoch: usize,
    train_loss: f64,
    dev_loss: f64,
    dev_metric: Option<f64>,
    note: Option<String>,
}

#[derive(Debug, Serialize)]
struct TaskSummary {
    task: String,
    metric: &'static str,
    best_epoch: usize,
    /// Headline metric on the 0..100 scale.
    score: Option<f64>,
    dev_accuracy: Option<f64>,
    epochs: Vec<EpochSummary>,
}

fn lookup(name: &str) -> Result<TaskSpec> {
    let registry = TaskRegistry::alue();
    registry.get(name).cloned().ok_or_else(|| {
        UsageError(format!("unknown task `{name}` (known: {})", registry.names().join(", "))).into()
    })
}

fn load_mapping(path: Option<&Path>) -> Result<ColumnMapping> {
    Ok(match path {
        Some(p) => ColumnMapping::load(p)?,
        None => ColumnMapping::default(),
    })
}

fn format_label(l: &LabelValue) -> String {
    match l {
        LabelValue::Class(c) => c.to_string(),
        LabelValue::Labels(s) => s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        LabelValue::Value(v) => v.to_string(),
    }
}

/// Fine-tunes one task and writes its checkpoint, epoch log and dev
/// predictions into `out_dir`.
#[allow(clippy::too_many_arguments)]
fn run_task(
    spec: &TaskSpec,
    train: &Path,
    dev: &Path,
    mapping: &ColumnMapping,
    start: &Model<f32>,
    vocab: &Vocab,
    cfg: &FinetuneConfig,
    out_dir: &Path,
    m: &mut RunManifest,
) -> Result<TaskSummary> {
    let rows = |p: &Path| -> Result<Vec<FinetuneExample>> {
        Ok(load_task_file(p, spec, mapping)?
            .iter()
            .map(|r| FinetuneExample::from_row(r, vocab))
            .collect())
    };
    let train_ex = rows(train)?;
    let dev_ex = rows(dev)?;
    m.input(train)?;
    m.input(dev)?;
    let outcome: FinetuneOutcome = run_finetune(spec, &train_ex, &dev_ex, start, vocab, cfg)
        .with_context(|| format!("fine-tuning {}", spec.name))?;

    create_dir(out_dir)?;
    let mut tensors = outcome.model.params.clone();
    tensors.extend(outcome.head.params.clone());
    let ckpt = Checkpoint::new(outcome.model.config.clone(), tensors)?
        .with_meta("task", &spec.name)
        .with_meta("head", head_name(spec.head_kind))
        .with_meta("best_epoch", outcome.best_epoch);
    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &ckpt_path)?;
    m.output(&ckpt_path);

    let mut log = String::from("epoch,train_loss,dev_loss,dev_metric\n");
    for e in &outcome.epochs {
        let metric = e.dev_metric.as_ref().map(|v| v.to_string()).unwrap_or_default();
        log.push_str(&format!("{},{},{},{metric}\n", e.epoch, e.train_loss, e.dev_loss));
    }
    let log_path = out_dir.join("epochs.csv");
    write_text(&log_path, &log)?;
    m.output(&log_path);

    let mut preds = String::from("gold\tprediction\n");
    for (e, p) in dev_ex.iter().zip(&outcome.dev_predictions) {
        preds.push_str(&format!("{}\t{}\n", format_label(&e.label), format_label(p)));
    }
    let pred_path = out_dir.join("predictions.tsv");
    write_text(&pred_path, &preds)?;
    m.output(&pred_path);

    let gold: Vec<LabelValue> = dev_ex.iter().map(|e| e.label.clone()).collect();
    let dev_accuracy = match spec.head_kind {
        HeadKind::Regression => None,
        _ => accuracy(&gold, &outcome.dev_predictions).ok(),
    };
    let best = outcome.best();
    Ok(TaskSummary {
        task: spec.name.clone(),
        metric: spec.metric.name(),
        best_epoch: outcome.best_epoch,
        score: best.dev_metric.as_ref().ok().map(|v| v * 100.0),
        dev_accuracy,
        epochs: outcome
            .epochs
            .iter()
            .map(|e| EpochSummary {
                epoch: e.epoch,
                train_loss: e.train_loss,
                dev_loss: e.dev_loss,
                dev_metric: e.dev_metric.as_ref().ok().copied(),
                note: e.dev_metric.as_ref().err().cloned(),
            })
            .collect(),
    })
}

fn head_name(kind: HeadKind) -> String {
    match kind {
        HeadKind::SingleClass(k) => format!("single_class:{k}"),
        HeadKind::PairClass(k) => format!("pair_class:{k}"),
        HeadKind::MultiLabel(k) => format!("multi_label:{k}"),
        HeadKind::Regression => "regression".into(),
    }
}

fn load_start(path: &Path, vocab: &Vocab) -> Result<Model<f32>> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.config.vocab_size != vocab.len() {
        return Err(cpt_core::Error::Config(format!(
            "{} has vocab_size {} but the vocabulary holds {} tokens",
            path.display(),
            ckpt.config.vocab_size,
            vocab.len()
        ))
        .into());
    }
    Ok(Model::from_checkpoint(&ckpt)?)
}

pub fn finetune(a: FinetuneArgs, seed: Option<u64>) -> Result<()> {
    let spec = lookup(&a.task)?;
    let cfg = a.flags.resolve(seed)?;
    let mapping = load_mapping(a.mapping.as_deref())?;
    let mut m = RunManifest::new(
        "finetune",
        Some(cfg.train.seed),
        FinetuneSnapshot {
            task: &spec.name,
            finetune: &cfg,
            mapping: &mapping,
        },
    )?;
    a.flags.record_inputs(&mut m)?;
    if let Some(p) = &a.mapping {
        m.input(p)?;
    }
    let vocab = Vocab::load(&a.flags.vocab)?;
    let start = load_start(&a.flags.checkpoint, &vocab)?;
    let summary = run_task(&spec, &a.train, &a.dev, &mapping, &start, &vocab, &cfg, &a.flags.out_dir, &mut m)?;
    match summary.score {
        Some(s) => println!(
            "{}: {} {:.2} at epoch {}",
            spec.name, summary.metric, s, summary.best_epoch
        ),
        None => println!("{}: {} undefined, kept epoch {}", spec.name, summary.metric, summary.best_epoch),
    }
    m.results(&summary)?;
    m.write(&a.flags.out_dir.join("manifest.json"))
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Directory holding <TASK>/train.tsv, <TASK>/dev.tsv and an optional
    /// <TASK>/mapping.toml per task
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Comma-separated tasks to run [default: every registered task]
    #[arg(long, value_delimiter = ',')]
    pub tasks: Vec<String>,
    #[command(flatten)]
    pub flags: FinetuneFlags,
}

#[derive(Debug, Serialize)]
struct BenchmarkSnapshot<'a> {
    tasks: &'a [String],
    finetune: &'a FinetuneConfig,
}

#[derive(Debug, Serialize)]
struct BenchmarkRow {
    task: String,
    score: Option<f64>,
    error: Option<String>,
    details: Option<TaskSummary>,
}

pub fn benchmark(a: BenchmarkArgs, seed: Option<u64>) -> Result<()> {
    let registry = TaskRegistry::alue();
    let names: Vec<String> = if a.tasks.is_empty() {
        registry.names().iter().map(|s| s.to_string()).collect()
    } else {
        a.tasks.clone()
    };
    let specs = names.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>()?;
    let cfg = a.flags.resolve(seed)?;
    let mut m = RunManifest::new(
        "benchmark",
        Some(cfg.train.seed),
        BenchmarkSnapshot {
            tasks: &names,
            finetune: &cfg,
        },
    )?;
    a.flags.record_inputs(&mut m)?;
    let vocab = Vocab::load(&a.flags.vocab)?;
    let start = load_start(&a.flags.checkpoint, &vocab)?;
    create_dir(&a.flags.out_dir)?;

    let mut rows = Vec::new();
    let mut details = Vec::new();
    let mut numerical = false;
    for spec in &specs {
        let dir = a.data_dir.join(&spec.name);
        let attempt = (|| -> Result<TaskSummary> {
            let map_path = dir.join("mapping.toml");
            let mapping = if map_path.is_file() {
                m.input(&map_path)?;
                ColumnMapping::load(&map_path)?
            } else {
                ColumnMapping::default()
            };
            run_task(
                spec,
                &dir.join("train.tsv"),
                &dir.join("dev.tsv"),
                &mapping,
                &start,
                &vocab,
                &cfg,
                &a.flags.out_dir.join(&spec.name),
                &mut m,
            )
        })();
        let outcome = match &attempt {
            Ok(s) => s
                .score
                .ok_or_else(|| format!("{} undefined on dev", spec.metric.name())),
            Err(e) => {
                log::error!("{}: {e:#}", spec.name);
                numerical |= e
                    .chain()
                    .any(|c| c.downcast_ref::<cpt_core::Error>().is_some_and(|x| x.is_numerical()));
                Err(format!("{e:#}"))
            }
        };
        rows.push(TaskResult {
            task: spec.name.clone(),
            metric: spec.metric,
            dialectal: spec.dialectal,
            outcome: outcome.clone(),
            best_epoch: attempt.as_ref().ok().map(|s| s.best_epoch),
        });
        details.push(BenchmarkRow {
            task: spec.name.clone(),
            score: outcome.as_ref().ok().copied(),
            error: outcome.err(),
            details: attempt.ok(),
        });
    }

    let table = BenchmarkTable::from_rows(rows);
    let text = table.to_text();
    print!("{text}");
    let text_path = a.flags.out_dir.join("results.txt");
    let csv_path = a.flags.out_dir.join("results.csv");
    write_text(&text_path, &text)?;
    write_text(&csv_path, &table.to_csv())?;
    m.output(&text_path);
    m.output(&csv_path);
    m.results(&details)?;
    m.write(&a.flags.out_dir.join("manifest.json"))?;

    if table.any_failed() {
        let failed: Vec<&str> = table
            .rows
            .iter()
            .filter(|r| r.outcome.is_err())
            .map(|r| r.task.as_str())
            .collect();
        return Err(Reported {
            numerical,
            message: format!("{} task(s) failed: {}", failed.len(), failed.join(", ")),
        }
        .into());
    }
    Ok(())
}
