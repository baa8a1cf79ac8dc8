//! Training example construction: MLM, TLM (with position reset on the
//! target sentence), unmasked sentence pairs for fine-tuning, and padding.
//!
//! Masking selects each non-special position independently with
//! `select_prob`; a selected position becomes `[MASK]` with probability
//! `mask_prob_within` and a uniformly drawn non-special id otherwise. There is
//! no keep-unchanged bucket.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Vocab};

pub const DEFAULT_MAX_SEQ_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedExample {
    pub token_ids: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    /// Original id at positions selected for prediction, `None` elsewhere.
    pub mlm_labels: Vec<Option<TokenId>>,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    fn push(&mut self, id: TokenId, position: u32, segment: u8) {
        self.token_ids.push(id);
        self.position_ids.push(position);
        self.segment_ids.push(segment);
        self.attention_mask.push(1);
        self.mlm_labels.push(None);
    }

    pub fn num_labels(&self) -> usize {
        self.mlm_labels.iter().filter(|l| l.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub mask_prob_within: f64,
    pub random_prob_within: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_prob_within: 0.9,
            random_prob_within: 0.1,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.select_prob, self.mask_prob_within, self.random_prob_within];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        if (self.mask_prob_within + self.random_prob_within - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mask_prob_within + random_prob_within = {} (must be 1)",
                self.mask_prob_within + self.random_prob_within
            )));
        }
        Ok(())
    }
}

/// Per-example RNG derived from (seed, example index) so examples can be
/// built in any order or in parallel.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// What happened at one position during masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Special token, never considered.
    Special,
    Unselected,
    Masked,
    /// Replaced by a random draw (which may equal the original id).
    Random(TokenId),
}

/// Apply masking in place to every position where `maskable` is true.
pub fn mask_positions<R: Rng + ?Sized>(
    ex: &mut EncodedExample,
    maskable: &[bool],
    vocab: &Vocab,
    replacement_pool: &[TokenId],
    cfg: &MaskingConfig,
    rng: &mut R,
) -> Vec<MaskAction> {
    let mask_id = vocab.specials().mask;
    let mut actions = Vec::with_capacity(ex.len());
    for (i, &can) in maskable.iter().enumerate() {
        if !can {
            actions.push(MaskAction::Special);
            continue;
        }
        if rng.gen::<f64>() >= cfg.select_prob {
            actions.push(MaskAction::Unselected);
            continue;
        }
        let original = ex.token_ids[i];
        ex.mlm_labels[i] = Some(original);
        if rng.gen::<f64>() < cfg.mask_prob_within || replacement_pool.is_empty() {
            ex.token_ids[i] = mask_id;
            actions.push(MaskAction::Masked);
        } else {
            let drawn = replacement_pool[rng.gen_range(0..replacement_pool.len())];
            ex.token_ids[i] = drawn;
            actions.push(MaskAction::Random(drawn));
        }
    }
    actions
}

/// Reusable masking context: caches the replacement pool of a vocab.
#[derive(Debug, Clone)]
pub struct Masker<'v> {
    vocab: &'v Vocab,
    pool: Vec<TokenId>,
    cfg: MaskingConfig,
    max_seq_len: usize,
}

impl<'v> Masker<'v> {
    pub fn new(vocab: &'v Vocab, cfg: MaskingConfig, max_seq_len: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            vocab,
            pool: vocab.non_special_ids(),
            cfg,
            max_seq_len,
        })
    }

    pub fn config(&self) -> &MaskingConfig {
        &self.cfg
    }

    pub fn mlm<R: Rng + ?Sized>(
        &self,
        ids: &[TokenId],
        rng: &mut R,
    ) -> Result<(EncodedExample, Vec<MaskAction>)> {
        let mut ex = unmasked_mlm(ids, self.vocab, self.max_seq_len)?;
        let n = ex.len();
        let maskable: Vec<bool> = (0..n).map(|i| i != 0 && i != n - 1).collect();
        let actions = mask_positions(&mut ex, &maskable, self.vocab, &self.pool, &self.cfg, rng);
        Ok((ex, actions))
    }

    pub fn tlm<R: Rng + ?Sized>(
        &self,
        source: &[TokenId],
        target: &[TokenId],
        rng: &mut R,
    ) -> Result<(EncodedExample, Vec<MaskAction>)> {
        let mut ex = unmasked_tlm(source, target, self.vocab, self.max_seq_len)?;
        let sep_a = source.len() + 1;
        let n = ex.len();
        let maskable: Vec<bool> = (0..n).map(|i| i != 0 && i != sep_a && i != n - 1).collect();
        let actions = mask_positions(&mut ex, &maskable, self.vocab, &self.pool, &self.cfg, rng);
        Ok((ex, actions))
    }
}

fn unmasked_mlm(ids: &[TokenId], vocab: &Vocab, max_seq_len: usize) -> Result<EncodedExample> {
    if ids.len() + 2 > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len() + 2,
            max: max_seq_len,
        });
    }
    let s = vocab.specials();
    let mut ex = EncodedExample::default();
    ex.push(s.cls, 0, 0);
    for (i, &id) in ids.iter().enumerate() {
        ex.push(id, i as u32 + 1, 0);
    }
    ex.push(s.sep, ids.len() as u32 + 1, 0);
    Ok(ex)
}

fn unmasked_tlm(
    source: &[TokenId],
    target: &[TokenId],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<EncodedExample> {
    let total = source.len() + target.len() + 3;
    if total > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: max_seq_len,
        });
    }
    let s = vocab.specials();
    let mut ex = unmasked_mlm(source, vocab, max_seq_len)?;
    for (i, &id) in target.iter().enumerate() {
        ex.push(id, i as u32, 1);
    }
    ex.push(s.sep, target.len() as u32, 1);
    Ok(ex)
}

/// `[CLS] ids [SEP]` with masking, segment 0 and positions `0..len`.
pub fn build_mlm_example<R: Rng + ?Sized>(
    ids: &[TokenId],
    vocab: &Vocab,
    cfg: &MaskingConfig,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<EncodedExample> {
    Ok(Masker::new(vocab, *cfg, max_seq_len)?.mlm(ids, rng)?.0)
}

/// `[CLS] source [SEP] target [SEP]`; positions restart at 0 on the target
/// segment (including its trailing `[SEP]`). Both sides are masked.
pub fn build_tlm_example<R: Rng + ?Sized>(
    source: &[TokenId],
    target: &[TokenId],
    vocab: &Vocab,
    cfg: &MaskingConfig,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<EncodedExample> {
    Ok(Masker::new(vocab, *cfg, max_seq_len)?.tlm(source, target, rng)?.0)
}

/// Unmasked `[CLS] a [SEP] b [SEP]` for sentence-pair fine-tuning, or
/// `[CLS] a [SEP]` when `b` is empty. Positions run straight through.
///
/// Overflow truncates from the tail of the longer side, one token at a time
/// (the first side on ties), so equal sides shrink alternately.
pub fn build_pair_example(
    a: &[TokenId],
    b: &[TokenId],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<EncodedExample> {
    let specials = if b.is_empty() { 2 } else { 3 };
    if max_seq_len < specials {
        return Err(Error::Config(format!(
            "max_seq_len {max_seq_len} cannot hold {specials} special tokens"
        )));
    }
    let (mut la, mut lb) = (a.len(), b.len());
    while la + lb + specials > max_seq_len {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let s = vocab.specials();
    let mut ex = EncodedExample::default();
    let mut pos = 0u32;
    let mut push = |ex: &mut EncodedExample, id, seg| {
        ex.push(id, pos, seg);
        pos += 1;
    };
    push(&mut ex, s.cls, 0);
    for &id in &a[..la] {
        push(&mut ex, id, 0);
    }
    push(&mut ex, s.sep, 0);
    if !b.is_empty() {
        for &id in &b[..lb] {
            push(&mut ex, id, 1);
        }
        push(&mut ex, s.sep, 1);
    }
    Ok(ex)
}

/// Rectangular, row-major batch of `batch_size x seq_len` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<TokenId>,
    pub position_ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub mlm_labels: Vec<Option<TokenId>>,
}

impl Batch {
    pub fn num_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    /// Flat indices of positions that carry a label.
    pub fn labeled_positions(&self) -> Vec<usize> {
        self.mlm_labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.map(|_| i))
            .collect()
    }

    pub fn num_labels(&self) -> usize {
        self.mlm_labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Right-pad every example to `batch_len`. Pad positions continue counting
/// from the last real position.
pub fn pad_batch(examples: &[EncodedExample], pad_id: TokenId, batch_len: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::Data("cannot build an empty batch".into()));
    }
    let n = examples.len() * batch_len;
    let mut b = Batch {
        batch_size: examples.len(),
        seq_len: batch_len,
        token_ids: Vec::with_capacity(n),
        position_ids: Vec::with_capacity(n),
        segment_ids: Vec::with_capacity(n),
        attention_mask: Vec::with_capacity(n),
        mlm_labels: Vec::with_capacity(n),
    };
    for (i, ex) in examples.iter().enumerate() {
        if ex.len() > batch_len {
            return Err(Error::Data(format!(
                "example {i} has length {} > batch_len {batch_len}",
                ex.len()
            )));
        }
        let pad = batch_len - ex.len();
        let last_pos = ex.position_ids.last().copied();
        let last_seg = ex.segment_ids.last().copied().unwrap_or(0);
        b.token_ids.extend_from_slice(&ex.token_ids);
        b.token_ids.extend(std::iter::repeat(pad_id).take(pad));
        b.position_ids.extend_from_slice(&ex.position_ids);
        let start = last_pos.map_or(0, |p| p + 1);
        b.position_ids.extend((0..pad as u32).map(|k| start + k));
        b.segment_ids.extend_from_slice(&ex.segment_ids);
        b.segment_ids.extend(std::iter::repeat(last_seg).take(pad));
        b.attention_mask.extend_from_slice(&ex.attention_mask);
        b.attention_mask.extend(std::iter::repeat(0).take(pad));
        b.mlm_labels.extend_from_slice(&ex.mlm_labels);
        b.mlm_labels.extend(std::iter::repeat(None).take(pad));
    }
    Ok(b)
}

/// Pad to the longest example in the slice.
pub fn pad_to_longest(examples: &[EncodedExample], pad_id: TokenId) -> Result<Batch> {
    let len = examples.iter().map(EncodedExample::len).max().unwrap_or(0);
    pad_batch(examples, pad_id, len)
}

/// Debug text form used by `dump-examples`: one labelled row per field,
/// columns separated by single spaces; `-` marks an ignored label.
pub fn format_example(ex: &EncodedExample, vocab: &Vocab) -> String {
    fn row<T: ToString>(name: &str, xs: impl Iterator<Item = T>) -> String {
        let cols: Vec<String> = xs.map(|x| x.to_string()).collect();
        format!("{name:<10} {}\n", cols.join(" "))
    }
    let mut s = String::new();
    s += &row("tokens", ex.token_ids.iter().map(|&i| vocab.token(i).unwrap_or("?").to_string()));
    s += &row("ids", ex.token_ids.iter());
    s += &row("positions", ex.position_ids.iter());
    s += &row("segments", ex.segment_ids.iter());
    s += &row("mask", ex.attention_mask.iter());
    s += &row(
        "labels",
        ex.mlm_labels
            .iter()
            .map(|l| l.map_or("-".to_string(), |v| v.to_string())),
    );
    s
}
