//! WordPiece vocabulary training, encoding and vocab file IO.
//!
//! Training starts from every character in two forms (word-initial `c` and
//! continuation `##c`) and repeatedly merges the adjacent pair with the
//! highest `count(pair) / (count(left) * count(right))`. Ties go to the
//! lexicographically smallest merged piece.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::SentenceRecord;
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];
pub const CONTINUATION: &str = "##";

/// Words longer than this (in chars) encode straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
}

impl SpecialIds {
    pub fn all(&self) -> [TokenId; 5] {
        [self.pad, self.unk, self.cls, self.sep, self.mask]
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.all().contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
}

impl Vocab {
    /// Build a vocab from tokens in id order, validating the invariants.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Vocab(format!("empty token at id {i}")));
            }
            if let Some(prev) = index.insert(t.clone(), i as TokenId) {
                return Err(Error::Vocab(format!(
                    "duplicate token `{t}` at ids {prev} and {i}"
                )));
            }
        }
        let missing: Vec<&str> = SPECIAL_TOKENS
            .iter()
            .copied()
            .filter(|s| !index.contains_key(*s))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Vocab(format!(
                "missing special token(s): {}",
                missing.join(", ")
            )));
        }
        let specials = SpecialIds {
            pad: index[PAD],
            unk: index[UNK],
            cls: index[CLS],
            sep: index[SEP],
            mask: index[MASK],
        };
        Ok(Self {
            tokens,
            index,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids eligible as random replacements during masking.
    pub fn non_special_ids(&self) -> Vec<TokenId> {
        (0..self.tokens.len() as TokenId)
            .filter(|&i| !self.specials.contains(i))
            .collect()
    }

    /// Ids that `encode` may emit for a piece: everything but pad/cls/sep/mask.
    fn encodable(&self, piece: &str) -> Option<TokenId> {
        let id = self.id(piece)?;
        let s = self.specials;
        if id == s.pad || id == s.cls || id == s.sep || id == s.mask {
            None
        } else {
            Some(id)
        }
    }

    /// Greedy longest-match-first WordPiece encoding of whitespace-split words.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        if n_chars > MAX_WORD_CHARS {
            out.push(self.specials.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut piece = String::new();
        while start < n_chars {
            let mut found = None;
            for end in (start + 1..=n_chars).rev() {
                piece.clear();
                if start > 0 {
                    piece.push_str(CONTINUATION);
                }
                piece.push_str(&word[bounds[start]..bounds[end]]);
                if let Some(id) = self.encodable(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.specials.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Join pieces back into text; continuation pieces attach to the
    /// previous piece. Padding is skipped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == self.specials.pad {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            match tok.strip_prefix(CONTINUATION) {
                Some(rest) if !s.is_empty() => s.push_str(rest),
                _ => {
                    if !s.is_empty() {
                        s.push(' ');
                    }
                    s.push_str(tok);
                }
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Err(Error::Vocab("vocab file is empty".into()));
        }
        let tokens = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Self::from_tokens(tokens)
    }
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::load(path)
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    vocab.save(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WordPieceConfig {
    pub vocab_size: usize,
    pub min_frequency: u64,
}

impl Default for WordPieceConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64_000,
            min_frequency: 2,
        }
    }
}

type Pair = (u32, u32);

struct Trainer {
    pieces: Vec<String>,
    piece_ids: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    unit_counts: HashMap<u32, u64>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, HashSet<usize>>,
}

impl Trainer {
    fn add_word_stats(&mut self, w: usize) {
        let (syms, count) = &self.words[w];
        for &s in syms {
            *self.unit_counts.entry(s).or_insert(0) += count;
        }
        for p in syms.windows(2) {
            let pair = (p[0], p[1]);
            *self.pair_counts.entry(pair).or_insert(0) += count;
            self.pair_words.entry(pair).or_default().insert(w);
        }
    }

    fn remove_word_stats(&mut self, w: usize) {
        let (syms, count) = &self.words[w];
        for &s in syms {
            let c = self.unit_counts.get_mut(&s).expect("unit counted");
            *c -= count;
            if *c == 0 {
                self.unit_counts.remove(&s);
            }
        }
        for p in syms.windows(2) {
            let pair = (p[0], p[1]);
            let c = self.pair_counts.get_mut(&pair).expect("pair counted");
            *c -= count;
            if *c == 0 {
                self.pair_counts.remove(&pair);
                self.pair_words.remove(&pair);
            } else if let Some(ws) = self.pair_words.get_mut(&pair) {
                ws.remove(&w);
            }
        }
    }

    fn merged_piece(&self, (l, r): Pair) -> String {
        let right = &self.pieces[r as usize];
        let right = right.strip_prefix(CONTINUATION).unwrap_or(right);
        format!("{}{}", self.pieces[l as usize], right)
    }

    /// Best-scoring eligible pair. Scores compare exactly by cross
    /// multiplication; ties fall back to the merged string, then the ids.
    fn best_pair(&self, min_frequency: u64) -> Option<Pair> {
        let mut best: Option<(Pair, u64, u128, String)> = None;
        for (&pair, &count) in &self.pair_counts {
            if count < min_frequency {
                continue;
            }
            let denom = self.unit_counts[&pair.0] as u128 * self.unit_counts[&pair.1] as u128;
            let better = match &best {
                None => true,
                Some((bp, bc, bd, bs)) => {
                    let lhs = count as u128 * bd;
                    let rhs = *bc as u128 * denom;
                    match lhs.cmp(&rhs) {
                        Ordering::Greater => true,
                        Ordering::Less => false,
                        Ordering::Equal => {
                            let m = self.merged_piece(pair);
                            match m.cmp(bs) {
                                Ordering::Less => true,
                                Ordering::Greater => false,
                                Ordering::Equal => pair < *bp,
                            }
                        }
                    }
                }
            };
            if better {
                best = Some((pair, count, denom, self.merged_piece(pair)));
            }
        }
        best.map(|b| b.0)
    }

    fn apply_merge(&mut self, pair: Pair, merged: u32) {
        let mut affected: Vec<usize> = self
            .pair_words
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        affected.sort_unstable();
        for w in affected {
            self.remove_word_stats(w);
            let syms = &mut self.words[w].0;
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
            self.add_word_stats(w);
        }
    }
}

/// Count whitespace-separated words, sharded across the rayon pool.
fn count_words(corpus: &[SentenceRecord]) -> HashMap<String, u64> {
    corpus
        .par_iter()
        .fold(HashMap::new, |mut m: HashMap<String, u64>, s| {
            for w in s.text.split_whitespace() {
                *m.entry(w.to_string()).or_insert(0) += 1;
            }
            m
        })
        .reduce(HashMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            a
        })
}

/// Smallest vocab size the corpus admits: specials plus both forms of every
/// character.
pub fn minimum_vocab_size(corpus: &[SentenceRecord]) -> usize {
    let chars: BTreeSet<char> = corpus.iter().flat_map(|s| s.text.chars()).filter(|c| !c.is_whitespace()).collect();
    SPECIAL_TOKENS.len() + 2 * chars.len()
}

pub fn train_wordpiece(corpus: &[SentenceRecord], cfg: WordPieceConfig) -> Result<Vocab> {
    let word_counts = count_words(corpus);
    if word_counts.is_empty() {
        return Err(Error::Data("cannot train a vocab on an empty corpus".into()));
    }
    let mut words: Vec<(String, u64)> = word_counts.into_iter().collect();
    words.sort_unstable();

    let alphabet: BTreeSet<char> = words.iter().flat_map(|(w, _)| w.chars()).collect();
    let minimum = SPECIAL_TOKENS.len() + 2 * alphabet.len();
    if cfg.vocab_size < minimum {
        return Err(Error::VocabTooSmall {
            requested: cfg.vocab_size,
            minimum,
        });
    }

    let mut pieces: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet.iter().map(|c| c.to_string()));
    pieces.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));
    let piece_ids: HashMap<String, u32> = pieces
        .iter()
        .enumerate()
        .map(|(i, p)| (p.clone(), i as u32))
        .collect();

    let words: Vec<(Vec<u32>, u64)> = words
        .into_iter()
        .map(|(w, c)| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, ch)| {
                    let p = if i == 0 {
                        ch.to_string()
                    } else {
                        format!("{CONTINUATION}{ch}")
                    };
                    piece_ids[&p]
                })
                .collect();
            (syms, c)
        })
        .collect();

    let mut t = Trainer {
        pieces,
        piece_ids,
        words,
        unit_counts: HashMap::new(),
        pair_counts: HashMap::new(),
        pair_words: HashMap::new(),
    };
    for w in 0..t.words.len() {
        t.add_word_stats(w);
    }

    while t.pieces.len() < cfg.vocab_size {
        let Some(pair) = t.best_pair(cfg.min_frequency) else {
            return Err(Error::Vocab(format!(
                "corpus supports only {} entries at min_frequency {} (requested {})",
                t.pieces.len(),
                cfg.min_frequency,
                cfg.vocab_size
            )));
        };
        let piece = t.merged_piece(pair);
        let id = match t.piece_ids.get(&piece) {
            Some(&id) => id,
            None => {
                let id = t.pieces.len() as u32;
                t.piece_ids.insert(piece.clone(), id);
                t.pieces.push(piece);
                id
            }
        };
        t.apply_merge(pair, id);
    }

    Vocab::from_tokens(t.pieces)
}
