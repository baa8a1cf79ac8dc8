//! Corpus ingestion and cleaning.
//!
//! Corpora are line oriented: one cleaned sentence per line for monolingual
//! text, and two tab-separated columns (Arabic source, English target) for
//! parallel text. Cleaning removes HTML markup, emoji, tashkeel diacritics and
//! tatweel, then collapses whitespace.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use regex::{Regex, RegexSet};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TATWEEL: char = '\u{0640}';

/// Pretraining stage a sentence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    /// Mixed Arabic and dialectal variants.
    C1,
    /// Egyptian dialectal monolingual text.
    C2,
    /// Arabic-English parallel text.
    C3,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::C1 => "C1",
            Stage::C2 => "C2",
            Stage::C3 => "C3",
        };
        f.write_str(s)
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(Stage::C1),
            "C2" => Ok(Stage::C2),
            "C3" => Ok(Stage::C3),
            _ => Err(Error::Config(format!("unknown stage `{s}` (expected C1, C2 or C3)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SentenceRecord {
    pub text: String,
    pub corpus_id: String,
    pub stage: Stage,
}

impl SentenceRecord {
    pub fn new(text: impl Into<String>, corpus_id: impl Into<String>, stage: Stage) -> Self {
        Self {
            text: text.into(),
            corpus_id: corpus_id.into(),
            stage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: String,
    pub target: String,
}

/// Inclusive codepoint interval. Written in config files as `"1F300-1FAFF"`
/// or a single `"FE0F"` (an optional `U+` prefix is accepted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CodepointRange {
    pub start: u32,
    pub end: u32,
}

impl CodepointRange {
    pub const fn new(start: u32, end: u32) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, c: char) -> bool {
        let c = c as u32;
        self.start <= c && c <= self.end
    }
}

fn parse_hex(s: &str) -> Result<u32> {
    let t = s.trim();
    let t = t
        .strip_prefix("U+")
        .or_else(|| t.strip_prefix("u+"))
        .or_else(|| t.strip_prefix("0x"))
        .unwrap_or(t);
    u32::from_str_radix(t, 16).map_err(|_| Error::Config(format!("bad hex codepoint `{s}`")))
}

impl FromStr for CodepointRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (start, end) = match s.split_once('-') {
            Some((a, b)) => (parse_hex(a)?, parse_hex(b)?),
            None => {
                let v = parse_hex(s)?;
                (v, v)
            }
        };
        if start > end {
            return Err(Error::Config(format!("empty codepoint range `{s}`")));
        }
        Ok(Self { start, end })
    }
}

impl fmt::Display for CodepointRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.start == self.end {
            write!(f, "{:04X}", self.start)
        } else {
            write!(f, "{:04X}-{:04X}", self.start, self.end)
        }
    }
}

impl Serialize for CodepointRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CodepointRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn check_sorted_disjoint(name: &str, ranges: &[CodepointRange]) -> Result<()> {
    for w in ranges.windows(2) {
        if w[1].start <= w[0].end {
            return Err(Error::Config(format!(
                "{name}: ranges {} and {} overlap or are out of order",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Cleaning settings. The tashkeel set is stored as codepoint ranges in
/// config files and expanded to a set in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CleaningConfigFile", into = "CleaningConfigFile")]
pub struct CleaningConfig {
    pub strip_html: bool,
    pub emoji_ranges: Vec<CodepointRange>,
    pub tashkeel_set: BTreeSet<char>,
    pub strip_tatweel: bool,
    pub template_blocklist: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CleaningConfigFile {
    #[serde(default = "yes")]
    strip_html: bool,
    #[serde(default = "default_emoji_ranges")]
    emoji_ranges: Vec<CodepointRange>,
    #[serde(default = "default_tashkeel_ranges")]
    tashkeel: Vec<CodepointRange>,
    #[serde(default = "yes")]
    strip_tatweel: bool,
    #[serde(default)]
    template_blocklist: Vec<String>,
}

fn yes() -> bool {
    true
}

pub fn default_emoji_ranges() -> Vec<CodepointRange> {
    vec![
        CodepointRange::new(0x2600, 0x27BF),
        CodepointRange::new(0xFE0F, 0xFE0F),
        CodepointRange::new(0x1F300, 0x1FAFF),
    ]
}

pub fn default_tashkeel_ranges() -> Vec<CodepointRange> {
    vec![
        CodepointRange::new(0x0610, 0x061A),
        CodepointRange::new(0x064B, 0x065F),
        CodepointRange::new(0x0670, 0x0670),
    ]
}

fn expand(ranges: &[CodepointRange]) -> BTreeSet<char> {
    ranges
        .iter()
        .flat_map(|r| r.start..=r.end)
        .filter_map(char::from_u32)
        .collect()
}

/// Collapse a codepoint set back into maximal sorted ranges.
fn compress(set: &BTreeSet<char>) -> Vec<CodepointRange> {
    let mut out: Vec<CodepointRange> = Vec::new();
    for &c in set {
        let c = c as u32;
        match out.last_mut() {
            Some(r) if r.end + 1 == c => r.end = c,
            _ => out.push(CodepointRange::new(c, c)),
        }
    }
    out
}

impl TryFrom<CleaningConfigFile> for CleaningConfig {
    type Error = Error;

    fn try_from(f: CleaningConfigFile) -> Result<Self> {
        check_sorted_disjoint("emoji_ranges", &f.emoji_ranges)?;
        check_sorted_disjoint("tashkeel", &f.tashkeel)?;
        Ok(Self {
            strip_html: f.strip_html,
            tashkeel_set: expand(&f.tashkeel),
            emoji_ranges: f.emoji_ranges,
            strip_tatweel: f.strip_tatweel,
            template_blocklist: f.template_blocklist,
        })
    }
}

impl From<CleaningConfig> for CleaningConfigFile {
    fn from(c: CleaningConfig) -> Self {
        Self {
            strip_html: c.strip_html,
            tashkeel: compress(&c.tashkeel_set),
            emoji_ranges: c.emoji_ranges,
            strip_tatweel: c.strip_tatweel,
            template_blocklist: c.template_blocklist,
        }
    }
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            strip_html: true,
            emoji_ranges: default_emoji_ranges(),
            tashkeel_set: expand(&default_tashkeel_ranges()),
            strip_tatweel: true,
            template_blocklist: Vec::new(),
        }
    }
}

impl CleaningConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("cleaning config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check_sorted_disjoint("emoji_ranges", &self.emoji_ranges)?;
        compile_blocklist(&self.template_blocklist)?;
        Ok(())
    }

    /// True if `c` is deleted by the codepoint filters.
    pub fn is_removed(&self, c: char) -> bool {
        (self.strip_tatweel && c == TATWEEL)
            || self.tashkeel_set.contains(&c)
            || self.emoji_ranges.iter().any(|r| r.contains(c))
    }
}

fn tag_pattern() -> &'static Regex {
    static TAG: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    TAG.get_or_init(|| Regex::new(r"<[^>]*>").expect("static regex"))
}

fn decode_entities(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

fn clean_pass(s: &str, cfg: &CleaningConfig) -> String {
    let filtered: String = s.chars().filter(|&c| !cfg.is_removed(c)).collect();
    let stripped = if cfg.strip_html {
        let decoded = decode_entities(&filtered);
        tag_pattern().replace_all(&decoded, " ").into_owned()
    } else {
        filtered
    };
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Clean one raw line. Returns `None` when nothing survives.
///
/// The pass (codepoint deletion, entity decoding, tag stripping, whitespace
/// collapse) is repeated until the text stops changing, so the result is a
/// fixed point and cleaning is idempotent.
pub fn clean_sentence(raw: &str, cfg: &CleaningConfig) -> Option<String> {
    let mut current = clean_pass(raw, cfg);
    loop {
        let next = clean_pass(&current, cfg);
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        None
    } else {
        Some(current)
    }
}

/// Compile a blocklist into a [`RegexSet`] (Rust `regex` crate syntax).
pub fn compile_blocklist(patterns: &[String]) -> Result<RegexSet> {
    for p in patterns {
        if let Err(e) = Regex::new(p) {
            return Err(Error::InvalidPattern {
                pattern: p.clone(),
                message: e.to_string(),
            });
        }
    }
    RegexSet::new(patterns).map_err(|e| Error::InvalidPattern {
        pattern: patterns.join(" | "),
        message: e.to_string(),
    })
}

pub fn filter_templates(
    sentences: Vec<SentenceRecord>,
    blocklist: &[String],
) -> Result<Vec<SentenceRecord>> {
    if blocklist.is_empty() {
        return Ok(sentences);
    }
    let set = compile_blocklist(blocklist)?;
    Ok(sentences
        .into_iter()
        .filter(|s| !set.is_match(&s.text))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub lines_read: usize,
    pub dropped_empty: usize,
    pub dropped_template: usize,
    pub kept: usize,
}

impl LoadReport {
    pub fn dropped(&self) -> usize {
        self.dropped_empty + self.dropped_template
    }
}

/// Split raw bytes into lines, validating UTF-8 per line (1-based numbers).
fn split_lines<'a>(path: &Path, bytes: &'a [u8]) -> Result<Vec<&'a str>> {
    let mut body = bytes;
    if let Some(stripped) = body.strip_suffix(b"\n") {
        body = stripped;
    }
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            std::str::from_utf8(line).map_err(|_| Error::InvalidUtf8 {
                path: path.to_path_buf(),
                line: i + 1,
            })
        })
        .collect()
}

/// Load a one-sentence-per-line corpus, cleaning and template-filtering it.
///
/// Lines are cleaned in parallel; the output order and counts match a
/// sequential pass.
pub fn load_corpus(
    path: &Path,
    corpus_id: &str,
    stage: Stage,
    cfg: &CleaningConfig,
) -> Result<(Vec<SentenceRecord>, LoadReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let lines = split_lines(path, &bytes)?;
    let blocklist = compile_blocklist(&cfg.template_blocklist)?;

    let cleaned: Vec<Option<String>> = lines.par_iter().map(|l| clean_sentence(l, cfg)).collect();

    let mut report = LoadReport {
        lines_read: lines.len(),
        ..LoadReport::default()
    };
    let mut out = Vec::with_capacity(cleaned.len());
    for text in cleaned {
        match text {
            None => report.dropped_empty += 1,
            Some(t) if !cfg.template_blocklist.is_empty() && blocklist.is_match(&t) => {
                report.dropped_template += 1
            }
            Some(t) => out.push(SentenceRecord::new(t, corpus_id, stage)),
        }
    }
    report.kept = out.len();
    log::info!(
        "{}: read {} lines, dropped {} empty, {} template, kept {}",
        path.display(),
        report.lines_read,
        report.dropped_empty,
        report.dropped_template,
        report.kept
    );
    Ok((out, report))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParallelReport {
    pub lines_read: usize,
    /// 1-based line numbers that did not have exactly two columns.
    pub malformed_lines: Vec<usize>,
    pub dropped_empty: usize,
    pub kept: usize,
}

impl ParallelReport {
    pub fn error_count(&self) -> usize {
        self.malformed_lines.len()
    }
}

/// Load a two-column TSV of parallel sentences.
pub fn load_parallel(
    path: &Path,
    cfg: &CleaningConfig,
) -> Result<(Vec<ParallelPair>, ParallelReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let lines = split_lines(path, &bytes)?;
    let mut report = ParallelReport {
        lines_read: lines.len(),
        ..ParallelReport::default()
    };

    let parsed: Vec<Option<Option<ParallelPair>>> = lines
        .par_iter()
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 2 {
                return None;
            }
            let pair = match (clean_sentence(cols[0], cfg), clean_sentence(cols[1], cfg)) {
                (Some(source), Some(target)) => Some(ParallelPair { source, target }),
                _ => None,
            };
            Some(pair)
        })
        .collect();

    let mut out = Vec::new();
    for (i, p) in parsed.into_iter().enumerate() {
        match p {
            None => {
                log::warn!("{}: line {} does not have 2 columns, skipped", path.display(), i + 1);
                report.malformed_lines.push(i + 1);
            }
            Some(None) => report.dropped_empty += 1,
            Some(Some(pair)) => out.push(pair),
        }
    }
    report.kept = out.len();
    Ok((out, report))
}

/// Write records one per line.
pub fn write_corpus(path: &Path, records: &[SentenceRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.text);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_parallel(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&p.source);
        s.push('\t');
        s.push_str(&p.target);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
