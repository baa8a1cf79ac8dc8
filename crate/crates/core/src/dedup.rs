//! Near-duplicate removal by rolling token-window hashing.
//!
//! Each sentence is split on spaces and every contiguous window of
//! `window_size` tokens is digested with MD5. Window frequencies are counted
//! over the whole corpus; a sentence whose share of repeated windows reaches
//! the threshold is removed, except that the first copy of a byte-identical
//! pool is kept.
//!
//! Sentences shorter than the window count as a single whole-sentence window.

use std::collections::{HashMap, HashSet};

use md5::{Digest, Md5};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};

pub const HASH_NAME: &str = "md5";

pub type WindowDigest = [u8; 16];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupConfig {
    pub window_size: usize,
    pub ratio_threshold: f64,
    pub hash_name: String,
}

impl Default for DedupConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            ratio_threshold: 0.7,
            hash_name: HASH_NAME.to_string(),
        }
    }
}

impl DedupConfig {
    pub fn new(window_size: usize, ratio_threshold: f64) -> Result<Self> {
        let cfg = Self {
            window_size,
            ratio_threshold,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ratio_threshold) {
            return Err(Error::Config(format!(
                "ratio_threshold {} outside [0, 1]",
                self.ratio_threshold
            )));
        }
        if self.hash_name != HASH_NAME {
            return Err(Error::Config(format!(
                "unsupported window digest `{}` (only `{HASH_NAME}`)",
                self.hash_name
            )));
        }
        Ok(())
    }
}

fn digest_tokens(tokens: &[&str]) -> WindowDigest {
    let mut h = Md5::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            h.update(b" ");
        }
        h.update(t.as_bytes());
    }
    h.finalize().into()
}

/// Digests of every window of `window_size` space-separated tokens.
pub fn windows_of(sentence: &str, window_size: usize) -> Vec<WindowDigest> {
    let tokens: Vec<&str> = sentence.split(' ').filter(|t| !t.is_empty()).collect();
    let n = tokens.len();
    if n == 0 {
        return Vec::new();
    }
    if n < window_size {
        return vec![digest_tokens(&tokens)];
    }
    tokens.windows(window_size).map(digest_tokens).collect()
}

/// Corpus-wide window frequencies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WindowIndex {
    pub counts: HashMap<WindowDigest, u64>,
}

impl WindowIndex {
    pub fn count(&self, digest: &WindowDigest) -> u64 {
        self.counts.get(digest).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    fn merge(mut self, other: WindowIndex) -> WindowIndex {
        let (mut big, small) = if self.counts.len() >= other.counts.len() {
            (std::mem::take(&mut self.counts), other.counts)
        } else {
            (other.counts, std::mem::take(&mut self.counts))
        };
        for (k, v) in small {
            *big.entry(k).or_insert(0) += v;
        }
        WindowIndex { counts: big }
    }
}

fn check_single_corpus(corpus: &[SentenceRecord]) -> Result<()> {
    if let Some(first) = corpus.first() {
        if let Some(other) = corpus.iter().find(|s| s.corpus_id != first.corpus_id) {
            return Err(Error::MixedCorpus {
                first: first.corpus_id.clone(),
                other: other.corpus_id.clone(),
            });
        }
    }
    Ok(())
}

/// Count pass. Sharded across the rayon pool; merging is commutative so the
/// result does not depend on the number of workers.
pub fn build_index(corpus: &[SentenceRecord], cfg: &DedupConfig) -> Result<WindowIndex> {
    cfg.validate()?;
    check_single_corpus(corpus)?;
    Ok(corpus
        .par_iter()
        .fold(WindowIndex::default, |mut idx, s| {
            for d in windows_of(&s.text, cfg.window_size) {
                *idx.counts.entry(d).or_insert(0) += 1;
            }
            idx
        })
        .reduce(WindowIndex::default, WindowIndex::merge))
}

fn ratio_of(digests: &[WindowDigest], index: &WindowIndex) -> f64 {
    if digests.is_empty() {
        return 0.0;
    }
    let repeated = digests.iter().filter(|d| index.count(d) > 1).count();
    repeated as f64 / digests.len() as f64
}

/// Share of this sentence's windows that occur more than once in the corpus.
pub fn repeated_ratio(sentence: &str, index: &WindowIndex, cfg: &DedupConfig) -> f64 {
    ratio_of(&windows_of(sentence, cfg.window_size), index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    /// Repeated-window ratio reached the threshold and the sentence has no
    /// byte-identical twin.
    HighRatio,
    /// A later copy of a byte-identical sentence that was already kept.
    ExactDuplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DedupReport {
    pub window_size: usize,
    pub ratio_threshold: f64,
    pub comparison: &'static str,
    pub hash_name: String,
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
    pub removed_high_ratio: usize,
    pub removed_exact_duplicate: usize,
    /// Exact-duplicate pools whose first copy was kept despite a high ratio.
    pub pools_kept_one: usize,
    pub distinct_windows: usize,
    pub total_windows: u64,
    /// (input index, reason) for every removed sentence.
    #[serde(skip)]
    pub removals: Vec<(usize, RemovalReason)>,
}

fn sentence_key(text: &str) -> WindowDigest {
    Md5::digest(text.as_bytes()).into()
}

/// State carried from the count pass into the filter pass.
///
/// Only digests are resident: window counts plus one digest per distinct
/// sentence for exact-duplicate pooling.
#[derive(Debug, Clone)]
pub struct DedupState {
    cfg: DedupConfig,
    index: WindowIndex,
    pool_sizes: HashMap<WindowDigest, u64>,
    seen: HashSet<WindowDigest>,
    report: DedupReport,
}

impl DedupState {
    /// Count pass over a stream of sentences from one corpus.
    pub fn count<I, S>(sentences: I, cfg: &DedupConfig) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        cfg.validate()?;
        let mut index = WindowIndex::default();
        let mut pool_sizes = HashMap::new();
        for s in sentences {
            let s = s.as_ref();
            for d in windows_of(s, cfg.window_size) {
                *index.counts.entry(d).or_insert(0) += 1;
            }
            *pool_sizes.entry(sentence_key(s)).or_insert(0) += 1;
        }
        Ok(Self::from_parts(cfg, index, pool_sizes))
    }

    fn from_parts(
        cfg: &DedupConfig,
        index: WindowIndex,
        pool_sizes: HashMap<WindowDigest, u64>,
    ) -> Self {
        let report = DedupReport {
            window_size: cfg.window_size,
            ratio_threshold: cfg.ratio_threshold,
            comparison: ">=",
            hash_name: cfg.hash_name.clone(),
            input: 0,
            kept: 0,
            removed: 0,
            removed_high_ratio: 0,
            removed_exact_duplicate: 0,
            pools_kept_one: 0,
            distinct_windows: index.distinct(),
            total_windows: index.total(),
            removals: Vec::new(),
        };
        Self {
            cfg: cfg.clone(),
            index,
            pool_sizes,
            seen: HashSet::new(),
            report,
        }
    }

    pub fn index(&self) -> &WindowIndex {
        &self.index
    }

    /// Filter pass: call once per sentence, in corpus order. `None` keeps it.
    pub fn decide(&mut self, text: &str) -> Option<RemovalReason> {
        let ratio = repeated_ratio(text, &self.index, &self.cfg);
        self.decide_with_ratio(text, ratio)
    }

    fn decide_with_ratio(&mut self, text: &str, ratio: f64) -> Option<RemovalReason> {
        let key = sentence_key(text);
        let first = self.seen.insert(key);
        let pooled = self.pool_sizes.get(&key).copied().unwrap_or(0) > 1;
        let decision = if ratio < self.cfg.ratio_threshold {
            None
        } else if pooled && first {
            self.report.pools_kept_one += 1;
            None
        } else if pooled {
            Some(RemovalReason::ExactDuplicate)
        } else {
            Some(RemovalReason::HighRatio)
        };
        let i = self.report.input;
        self.report.input += 1;
        match decision {
            None => self.report.kept += 1,
            Some(reason) => {
                self.report.removed += 1;
                match reason {
                    RemovalReason::HighRatio => self.report.removed_high_ratio += 1,
                    RemovalReason::ExactDuplicate => self.report.removed_exact_duplicate += 1,
                }
                self.report.removals.push((i, reason));
            }
        }
        decision
    }

    pub fn finish(self) -> DedupReport {
        self.report
    }
}

/// Two-pass deduplication of a single in-memory corpus.
pub fn dedup_corpus(
    corpus: Vec<SentenceRecord>,
    cfg: &DedupConfig,
) -> Result<(Vec<SentenceRecord>, DedupReport)> {
    let index = build_index(&corpus, cfg)?;
    let mut pool_sizes: HashMap<WindowDigest, u64> = HashMap::new();
    for s in &corpus {
        *pool_sizes.entry(sentence_key(&s.text)).or_insert(0) += 1;
    }
    let ratios: Vec<f64> = corpus
        .par_iter()
        .map(|s| repeated_ratio(&s.text, &index, cfg))
        .collect();

    let mut state = DedupState::from_parts(cfg, index, pool_sizes);
    let mut kept = Vec::with_capacity(corpus.len());
    for (s, ratio) in corpus.into_iter().zip(ratios) {
        if state.decide_with_ratio(&s.text, ratio).is_none() {
            kept.push(s);
        }
    }
    Ok((kept, state.finish()))
}
