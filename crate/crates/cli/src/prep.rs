use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use cpt_core::batching::{example_rng, format_example, Masker, MaskingConfig};
use cpt_core::corpus::{
    load_corpus, load_parallel, write_corpus, write_parallel, CleaningConfig, SentenceRecord, Stage,
};
use cpt_core::dedup::{DedupConfig, DedupState};
use cpt_core::tokenizer::{train_wordpiece, Vocab, WordPieceConfig};
use cpt_core::training::PretrainData;
use serde::Serialize;

use crate::manifest::{sidecar, RunManifest};
use crate::options::{read_lines, write_text};

#[derive(Debug, Args)]
pub struct CleanArgs {
    /// Raw input file
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Cleaned output file
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Cleaning config (TOML); built-in defaults otherwise
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input is source<TAB>target per line; both sides are cleaned
    #[arg(long)]
    pub parallel: bool,
    /// Stage tag recorded for the corpus: C1, C2 or C3
    #[arg(long, default_value = "C1")]
    pub stage: Stage,
    /// Corpus identifier [default: input file stem]
    #[arg(long)]
    pub corpus_id: Option<String>,
}

pub fn clean(a: CleanArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => CleaningConfig::load(p)?,
        None => CleaningConfig::default(),
    };
    let corpus_id = a.corpus_id.clone().unwrap_or_else(|| stem(&a.input));
    let mut m = RunManifest::new("clean", None, &cfg)?;
    m.input(&a.input)?;
    if let Some(p) = &a.config {
        m.input(p)?;
    }
    if a.parallel {
        let (pairs, report) = load_parallel(&a.input, &cfg)?;
        write_parallel(&a.output, &pairs)?;
        println!(
            "{}: {} lines, {} malformed, {} empty, {} kept",
            a.input.display(),
            report.lines_read,
            report.error_count(),
            report.dropped_empty,
            report.kept
        );
        m.results(&report)?;
    } else {
        let (records, report) = load_corpus(&a.input, &corpus_id, a.stage, &cfg)?;
        write_corpus(&a.output, &records)?;
        println!(
            "{}: {} lines, {} empty, {} template, {} kept",
            a.input.display(),
            report.lines_read,
            report.dropped_empty,
            report.dropped_template,
            report.kept
        );
        m.results(&report)?;
    }
    m.output(&a.output);
    m.write(&sidecar(&a.output))
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    /// Cleaned corpus, one sentence per line
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Deduplicated output
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Words per rolling window
    #[arg(long, default_value_t = 10)]
    pub window: usize,
    /// Remove a sentence when its repeated-window ratio is >= this value
    #[arg(long, default_value_t = 0.7)]
    pub threshold: f64,
    /// Report file (TOML) with counts and parameters
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Lines of `path` read lazily, blank lines skipped.
fn lines_of(path: &Path) -> Result<impl Iterator<Item = Result<String>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let path = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, line)| {
            line.map(|l| l.trim_end_matches('\r').to_string())
                .map_err(|e| match e.kind() {
                    std::io::ErrorKind::InvalidData => cpt_core::Error::InvalidUtf8 {
                        path: path.clone(),
                        line: i + 1,
                    }
                    .into(),
                    _ => anyhow::Error::from(e).context(format!("reading {}", path.display())),
                })
        })
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty())))
}

/// Two streaming passes over the input: count windows, then filter.
pub fn dedup(a: DedupArgs) -> Result<()> {
    let cfg = DedupConfig::new(a.window, a.threshold)?;
    let mut m = RunManifest::new("dedup", None, &cfg)?;
    m.input(&a.input)?;

    let mut err = None;
    let mut state = DedupState::count(
        lines_of(&a.input)?.map_while(|r| r.map_err(|e| err = Some(e)).ok()),
        &cfg,
    )?;
    if let Some(e) = err {
        return Err(e);
    }

    let out = File::create(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut w = BufWriter::new(out);
    for s in lines_of(&a.input)? {
        let s = s?;
        if state.decide(&s).is_none() {
            writeln!(w, "{s}")?;
        }
    }
    w.flush()?;
    let report = state.finish();
    println!(
        "{}: {} in, {} kept, {} removed ({} high ratio, {} exact duplicate)",
        a.input.display(),
        report.input,
        report.kept,
        report.removed,
        report.removed_high_ratio,
        report.removed_exact_duplicate
    );
    m.output(&a.output);
    if let Some(p) = &a.report {
        let text = toml::to_string(&report).context("rendering dedup report")?;
        write_text(p, &text)?;
        m.output(p);
    }
    m.results(&report)?;
    m.write(&sidecar(&a.output))
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCommand {
    /// Learn a WordPiece vocabulary from cleaned corpora
    Train(TokenizerTrainArgs),
    /// Encode each line of a file as space-separated token ids
    Encode(TokenizerEncodeArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerTrainArgs {
    /// Monolingual corpora, one sentence per line
    #[arg(long = "in", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Parallel corpora (source<TAB>target); both sides are used
    #[arg(long, num_args = 1..)]
    pub parallel: Vec<PathBuf>,
    /// Vocabulary file to write, one token per line
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Target vocabulary size, special tokens included
    #[arg(long, default_value_t = 64_000)]
    pub vocab_size: usize,
    /// Minimum pair frequency for a merge
    #[arg(long, default_value_t = 2)]
    pub min_frequency: u64,
}

#[derive(Debug, Serialize)]
struct WordPieceSnapshot {
    vocab_size: usize,
    min_frequency: u64,
}

#[derive(Debug, Args)]
pub struct TokenizerEncodeArgs {
    /// Vocabulary file
    #[arg(long)]
    pub vocab: PathBuf,
    /// Text to encode, one sentence per line
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output file [default: standard output]
    #[arg(long = "out")]
    pub output: Option<PathBuf>,
}

pub fn tokenizer(cmd: TokenizerCommand) -> Result<()> {
    match cmd {
        TokenizerCommand::Train(a) => tokenizer_train(a),
        TokenizerCommand::Encode(a) => tokenizer_encode(a),
    }
}

fn tokenizer_train(a: TokenizerTrainArgs) -> Result<()> {
    if a.inputs.is_empty() && a.parallel.is_empty() {
        return Err(crate::UsageError("tokenizer train needs --in or --parallel files".into()).into());
    }
    let cfg = WordPieceConfig {
        vocab_size: a.vocab_size,
        min_frequency: a.min_frequency,
    };
    let mut m = RunManifest::new(
        "tokenizer train",
        None,
        WordPieceSnapshot {
            vocab_size: cfg.vocab_size,
            min_frequency: cfg.min_frequency,
        },
    )?;
    let mut corpus = Vec::new();
    for p in &a.inputs {
        m.input(p)?;
        let id = stem(p);
        corpus.extend(read_lines(p)?.into_iter().map(|l| SentenceRecord::new(l, id.clone(), Stage::C1)));
    }
    for p in &a.parallel {
        m.input(p)?;
        let id = stem(p);
        for l in read_lines(p)? {
            for side in l.split('\t') {
                corpus.push(SentenceRecord::new(side, id.clone(), Stage::C3));
            }
        }
    }
    let vocab = train_wordpiece(&corpus, cfg)?;
    vocab.save(&a.output)?;
    println!("{}: {} tokens from {} sentences", a.output.display(), vocab.len(), corpus.len());
    m.output(&a.output);
    m.write(&sidecar(&a.output))
}

fn tokenizer_encode(a: TokenizerEncodeArgs) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let mut text = String::new();
    for l in read_lines(&a.input)? {
        let ids: Vec<String> = vocab.encode(&l).iter().map(|i| i.to_string()).collect();
        text.push_str(&ids.join(" "));
        text.push('\n');
    }
    match &a.output {
        Some(p) => {
            write_text(p, &text)?;
            let mut m = RunManifest::new("tokenizer encode", None, serde_json::Value::Null)?;
            m.input(&a.vocab)?;
            m.input(&a.input)?;
            m.output(p);
            m.write(&sidecar(p))
        }
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    /// Vocabulary file
    #[arg(long)]
    pub vocab: PathBuf,
    /// Corpus file, one sentence per line
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Input is source<TAB>target per line; examples use the TLM layout
    #[arg(long)]
    pub parallel: bool,
    /// Number of examples to print
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    /// Maximum sequence length in tokens
    #[arg(long, default_value_t = 256)]
    pub max_seq_len: usize,
}

/// Prints examples in the `format_example` layout, one block per example.
pub fn dump_examples(a: DumpArgs, seed: Option<u64>) -> Result<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let lines = read_lines(&a.input)?;
    let data = if a.parallel {
        PretrainData::Tlm(
            lines
                .iter()
                .take(a.count)
                .map(|l| {
                    let (s, t) = l.split_once('\t').unwrap_or((l.as_str(), ""));
                    (vocab.encode(s), vocab.encode(t))
                })
                .collect(),
        )
    } else {
        PretrainData::Mlm(lines.iter().take(a.count).map(|l| vocab.encode(l)).collect())
    };
    let masker = Masker::new(&vocab, MaskingConfig::default(), a.max_seq_len)?;
    let seed = seed.unwrap_or(0);
    let mut out = std::io::stdout().lock();
    for i in 0..data.len() {
        let ex = data.example(i, &masker, a.max_seq_len, &mut example_rng(seed, i as u64))?;
        writeln!(out, "# example {i}")?;
        writeln!(out, "{}", format_example(&ex, &vocab))?;
    }
    Ok(())
}

pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".into())
}
