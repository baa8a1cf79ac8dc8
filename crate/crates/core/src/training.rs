//! Optimizer, learning-rate schedule, pretraining and fine-tuning drivers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batching::{
    build_pair_example, example_rng, pad_to_longest, EncodedExample, Masker, MaskingConfig,
};
use crate::error::{Error, Result};
use crate::eval::TaskSpec;
use crate::model::loss::mlm_loss;
use crate::model::{
    is_no_decay, HeadKind, LabelValue, MlmRows, Mode, Model, OutputGrads, Params, Real, TaskHead,
    Targets,
};
use crate::tokenizer::{TokenId, Vocab};

const SPLIT_SALT: u64 = 0x5EED_0001;
const SHUFFLE_SALT: u64 = 0x5EED_0002;
const MASK_SALT: u64 = 0x5EED_0003;
const VALID_SALT: u64 = 0x5EED_0004;
const DROPOUT_SALT: u64 = 0x5EED_0005;
const HEAD_SALT: u64 = 0x5EED_0006;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub validation_every: usize,
    pub patience: usize,
    /// Share of a stage's data held out for validation.
    pub held_out_fraction: f64,
    pub max_seq_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            warmup_steps: 10_000,
            total_steps: 100_000,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-5,
            weight_decay: 0.2,
            clip_norm: 0.1,
            batch_size: 16,
            seed: 0,
            validation_every: 1_000,
            patience: 3,
            held_out_fraction: 0.01,
            max_seq_len: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return bad(format!(
                "need 0 < warmup_steps ({}) <= total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.validation_every == 0 || self.patience == 0 {
            return bad("batch_size, validation_every and patience must be at least 1".into());
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return bad(format!(
                "held_out_fraction must be in (0, 1), got {}",
                self.held_out_fraction
            ));
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: cfg.total_steps,
        });
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    if cfg.total_steps == cfg.warmup_steps {
        return Ok(if step == cfg.total_steps { 0.0 } else { cfg.base_lr });
    }
    Ok(cfg.base_lr * (cfg.total_steps - step) as f64
        / (cfg.total_steps - cfg.warmup_steps) as f64)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Params<T>,
    pub v: Params<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update at 1-based step `t`: decoupled weight decay
/// `p -= lr * wd * p` (skipped for biases and gains), then the
/// bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut Params<T>,
    grads: &Params<T>,
    state: &mut AdamState<T>,
    t: usize,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("AdamW steps are numbered from 1".into()));
    }
    if params.len() != grads.len() || params.names().zip(grads.names()).any(|(a, b)| a != b) {
        return Err(Error::Shape("parameter and gradient names differ".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            step: t,
            what: format!("gradient of {name}"),
        });
    }
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let bc1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let eps = T::lit(cfg.eps);
    let lr_t = T::lit(lr);
    let one = T::one();
    for (name, p) in params.iter_mut() {
        let g = grads.data(name);
        let decay = if is_no_decay(name) {
            T::zero()
        } else {
            T::lit(lr * cfg.weight_decay)
        };
        let m = &mut state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no moment for {name}")))?
            .data;
        let v = &mut state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no moment for {name}")))?
            .data;
        p.data
            .par_iter_mut()
            .zip(m.par_iter_mut())
            .zip(v.par_iter_mut())
            .zip(g.par_iter())
            .for_each(|(((p, m), v), &g)| {
                *p -= decay * *p;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}

/// Global L2 norm over all tensors, summed in name order.
pub fn global_norm<T: Real>(grads: &Params<T>) -> f64 {
    grads.iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
}

/// Scale all gradients by `clip_norm / norm` when the global norm exceeds
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut Params<T>, clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        grads.scale(T::lit(clip_norm / norm));
    }
    norm
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    (seed ^ DROPOUT_SALT).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Tlm,
}

/// Tokenized pretraining data.
#[derive(Debug, Clone, PartialEq)]
pub enum PretrainData {
    Mlm(Vec<Vec<TokenId>>),
    Tlm(Vec<(Vec<TokenId>, Vec<TokenId>)>),
}

impl PretrainData {
    pub fn len(&self) -> usize {
        match self {
            PretrainData::Mlm(v) => v.len(),
            PretrainData::Tlm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn objective(&self) -> Objective {
        match self {
            PretrainData::Mlm(_) => Objective::Mlm,
            PretrainData::Tlm(_) => Objective::Tlm,
        }
    }

    fn select(&self, idx: &[usize]) -> Self {
        match self {
            PretrainData::Mlm(v) => PretrainData::Mlm(idx.iter().map(|&i| v[i].clone()).collect()),
            PretrainData::Tlm(v) => PretrainData::Tlm(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }

    /// Deterministic (train, validation) split; validation gets
    /// `round(n * fraction)` items, at least one.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "need at least 2 items to hold out validation data, got {n}"
            )));
        }
        let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut example_rng(seed ^ SPLIT_SALT, 0));
        let mut val = order[..n_val].to_vec();
        let mut train = order[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        Ok((self.select(&train), self.select(&val)))
    }

    /// Masked example `i`, truncated to fit `max_seq_len`.
    pub fn example<R: rand::Rng + ?Sized>(
        &self,
        i: usize,
        masker: &Masker<'_>,
        max_seq_len: usize,
        rng: &mut R,
    ) -> Result<EncodedExample> {
        match self {
            PretrainData::Mlm(v) => {
                let ids = &v[i];
                Ok(masker.mlm(&ids[..ids.len().min(max_seq_len - 2)], rng)?.0)
            }
            PretrainData::Tlm(v) => {
                let (a, b) = &v[i];
                let (la, lb) = fit_pair(a.len(), b.len(), max_seq_len - 3);
                Ok(masker.tlm(&a[..la], &b[..lb], rng)?.0)
            }
        }
    }
}

/// Trim the longer side one token at a time until both fit `budget`.
fn fit_pair(mut la: usize, mut lb: usize, budget: usize) -> (usize, usize) {
    while la + lb > budget {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    (la, lb)
}

/// Mean MLM loss over every scored position of `examples`, in eval mode.
pub fn validation_loss(
    model: &Model<f32>,
    examples: &[EncodedExample],
    batch_size: usize,
    pad_id: TokenId,
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut scored = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = pad_to_longest(chunk, pad_id)?;
        let out = model.forward(&batch, Mode::Eval, MlmRows::Labeled)?;
        let labels: Vec<Option<u32>> = out.mlm_rows.iter().map(|&r| batch.mlm_labels[r]).collect();
        let l = mlm_loss(&out.mlm_logits, model.config.vocab_size, &labels)?;
        total += l.loss as f64 * l.scored as f64;
        scored += l.scored;
    }
    if scored == 0 {
        log::warn!("validation set has no masked positions; loss reported as 0");
        return Ok(0.0);
    }
    Ok(total / scored as f64)
}

/// Fixed validation examples: masking depends only on the seed and index.
pub fn validation_examples(
    data: &PretrainData,
    masker: &Masker<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<EncodedExample>> {
    (0..data.len())
        .map(|i| {
            let mut rng = example_rng(cfg.seed ^ VALID_SALT, i as u64);
            data.example(i, masker, cfg.max_seq_len, &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("step,lr,train_loss,val_loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.lr, opt(r.train_loss), opt(r.val_loss));
    }
    s
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Weights at the best validation loss.
    pub model: Model<f32>,
    pub best_val_loss: f64,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub log: Vec<LossRecord>,
}

impl PretrainOutcome {
    pub fn initial_val_loss(&self) -> f64 {
        self.log[0].val_loss.expect("step 0 is always validated")
    }
}

/// MLM or TLM pretraining from `model` with validation-based early stopping.
pub fn pretrain(
    mut model: Model<f32>,
    train: &PretrainData,
    valid: &PretrainData,
    vocab: &Vocab,
    masking: &MaskingConfig,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("pretraining needs non-empty train and validation data".into()));
    }
    if train.objective() != valid.objective() {
        return Err(Error::Data("train and validation data use different objectives".into()));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocab has {} tokens, model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let max_len = cfg.max_seq_len.min(model.config.max_positions);
    let masker = Masker::new(vocab, *masking, max_len)?;
    let pad = vocab.specials().pad;
    let cfg_eff = TrainConfig {
        max_seq_len: max_len,
        ..cfg.clone()
    };
    let val_examples = validation_examples(valid, &masker, &cfg_eff)?;

    let v0 = validation_loss(&model, &val_examples, cfg.batch_size, pad)?;
    log::info!("step 0: validation loss {v0:.6}");
    let mut log = vec![LossRecord {
        step: 0,
        lr: 0.0,
        train_loss: None,
        val_loss: Some(v0),
    }];
    let mut best = (v0, model.clone(), 0usize);
    let mut bad_evals = 0usize;
    let mut stopped_early = false;
    let mut state = AdamState::new(&model.params);

    let mut epoch = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut example_rng(cfg.seed ^ SHUFFLE_SALT, epoch));
    let mut cursor = 0usize;
    let mut drawn = 0u64;
    let mut steps_run = 0;

    for step in 1..=cfg.total_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                epoch += 1;
                cursor = 0;
                order.shuffle(&mut example_rng(cfg.seed ^ SHUFFLE_SALT, epoch));
                log::debug!("training data exhausted at step {step}; reshuffled for pass {epoch}");
            }
            idx.push((order[cursor], drawn));
            cursor += 1;
            drawn += 1;
        }
        let examples = idx
            .iter()
            .map(|&(i, k)| {
                let mut rng = example_rng(cfg.seed ^ MASK_SALT, k);
                train.example(i, &masker, max_len, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = pad_to_longest(&examples, pad)?;
        let out = model.forward(
            &batch,
            Mode::Train {
                seed: dropout_seed(cfg.seed, step),
            },
            MlmRows::Labeled,
        )?;
        let labels: Vec<Option<u32>> = out.mlm_rows.iter().map(|&r| batch.mlm_labels[r]).collect();
        let l = mlm_loss(&out.mlm_logits, model.config.vocab_size, &labels)?;
        if !l.loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "training loss".into(),
            });
        }
        let mut grads = model.backward(
            &out,
            OutputGrads {
                mlm_logits: Some(&l.grad),
                ..Default::default()
            },
        )?;
        clip_gradients(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg)?;
        adamw_step(&mut model.params, &grads, &mut state, step, lr, cfg)?;
        if let Some(name) = model.params.first_non_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("parameter {name}"),
            });
        }
        steps_run = step;
        let mut rec = LossRecord {
            step,
            lr,
            train_loss: Some(l.loss as f64),
            val_loss: None,
        };

        if step % cfg.validation_every == 0 || step == cfg.total_steps {
            let v = validation_loss(&model, &val_examples, cfg.batch_size, pad)?;
            rec.val_loss = Some(v);
            log::info!("step {step}: train loss {:.6}, validation loss {v:.6}", l.loss);
            if v < best.0 {
                best = (v, model.clone(), step);
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
        }
        log.push(rec);
        if bad_evals >= cfg.patience {
            log::info!("validation loss has not improved for {bad_evals} evaluations; stopping at step {step}");
            stopped_early = true;
            break;
        }
    }

    Ok(PretrainOutcome {
        model: best.1,
        best_val_loss: best.0,
        best_step: best.2,
        steps_run,
        stopped_early,
        log,
    })
}

/// One stage of a staged pretraining plan as written in a plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub tag: String,
    /// Monolingual files (one sentence per line) for MLM, parallel files
    /// (`source<TAB>target` per line) for TLM.
    pub corpora: Vec<PathBuf>,
    pub objective: Objective,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageSpec>,
}

impl StagePlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let plan: StagePlan =
            toml::from_str(text).map_err(|e| Error::Config(format!("stage plan: {e}")))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Relative corpus paths are resolved against `path`'s directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut plan.stages {
            for c in &mut s.corpora {
                if c.is_relative() {
                    *c = base.join(&*c);
                }
            }
        }
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut tags = std::collections::BTreeSet::new();
        for s in &self.stages {
            if !tags.insert(&s.tag) {
                return Err(Error::Config(format!("duplicate stage tag `{}`", s.tag)));
            }
            if s.tag.is_empty() || s.tag.contains(['/', '\\']) {
                return Err(Error::Config(format!("stage tag `{}` is not a plain name", s.tag)));
            }
            if s.corpora.is_empty() {
                return Err(Error::Config(format!("stage `{}` lists no corpora", s.tag)));
            }
            s.train.validate().map_err(|e| Error::Config(format!("stage `{}`: {e}", s.tag)))?;
        }
        Ok(())
    }
}

/// A plan stage with its data already tokenized.
#[derive(Debug, Clone)]
pub struct StageInput {
    pub tag: String,
    pub objective: Objective,
    pub data: PretrainData,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub tag: String,
    pub model: Model<f32>,
    /// `None` for the initial model.
    pub outcome: Option<PretrainOutcome>,
}

/// Runs stages in order, each starting from the previous stage's best
/// weights. The first result is the initial model, tagged `init`.
pub fn run_stage_plan(
    stages: &[StageInput],
    init: Model<f32>,
    vocab: &Vocab,
    masking: &MaskingConfig,
) -> Result<Vec<StageResult>> {
    for s in stages {
        if s.objective != s.data.objective() {
            return Err(Error::Config(format!(
                "stage `{}`: {:?} needs {} data",
                s.tag,
                s.objective,
                match s.objective {
                    Objective::Tlm => "parallel",
                    Objective::Mlm => "monolingual",
                }
            )));
        }
    }
    let mut results = vec![StageResult {
        tag: "init".into(),
        model: init,
        outcome: None,
    }];
    for s in stages {
        log::info!("stage `{}`: {:?} on {} items", s.tag, s.objective, s.data.len());
        let (train, valid) = s.data.split(s.train.held_out_fraction, s.train.seed)?;
        let start = results.last().expect("init present").model.clone();
        let outcome = pretrain(start, &train, &valid, vocab, masking, &s.train)
            .map_err(|e| match e {
                Error::Data(m) => Error::Data(format!("stage `{}`: {m}", s.tag)),
                other => other,
            })?;
        results.push(StageResult {
            tag: s.tag.clone(),
            model: outcome.model.clone(),
            outcome: Some(outcome),
        });
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneExample {
    pub a: Vec<TokenId>,
    pub b: Vec<TokenId>,
    pub label: LabelValue,
}

impl FinetuneExample {
    pub fn from_row(row: &crate::eval::TaskRow, vocab: &Vocab) -> Self {
        Self {
            a: vocab.encode(&row.text_a),
            b: vocab.encode(&row.text_b),
            label: row.label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    /// Optimizer settings; `total_steps` and `warmup_steps` are derived.
    pub train: TrainConfig,
    pub epochs: usize,
    pub warmup_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            epochs: 10,
            warmup_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Headline metric on the 0..1 scale, or why it is undefined.
    pub dev_metric: std::result::Result<f64, String>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model<f32>,
    pub head: TaskHead<f32>,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    pub dev_predictions: Vec<LabelValue>,
}

impl FinetuneOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

fn targets_for(kind: HeadKind, labels: &[&LabelValue], offset: usize) -> Result<Targets> {
    let mismatch = |i: usize, l: &LabelValue| {
        Error::Data(format!("row {}: label {l:?} does not fit {kind:?}", offset + i))
    };
    match kind {
        HeadKind::SingleClass(_) | HeadKind::PairClass(_) => labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LabelValue::Class(c) => Ok(*c),
                other => Err(mismatch(i, other)),
            })
            .collect::<Result<_>>()
            .map(Targets::Classes),
        HeadKind::MultiLabel(_) => labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LabelValue::Labels(s) => Ok(s.clone()),
                other => Err(mismatch(i, other)),
            })
            .collect::<Result<_>>()
            .map(Targets::MultiLabel),
        HeadKind::Regression => labels
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                LabelValue::Value(v) => Ok(*v),
                other => Err(mismatch(i, other)),
            })
            .collect::<Result<_>>()
            .map(Targets::Real),
    }
}

fn check_labels(task: &TaskSpec, data: &[FinetuneExample], split: &str) -> Result<()> {
    let head = TaskHead::<f32>::init(task.head_kind, 1, 0)?;
    let labels: Vec<&LabelValue> = data.iter().map(|e| &e.label).collect();
    let targets = targets_for(task.head_kind, &labels, 0)?;
    head.check_targets(&targets)
        .map_err(|e| Error::Data(format!("{} {split} split: {e}", task.name)))
}

fn pair_batch(
    examples: &[&FinetuneExample],
    vocab: &Vocab,
    max_len: usize,
) -> Result<crate::batching::Batch> {
    let encoded = examples
        .iter()
        .map(|e| build_pair_example(&e.a, &e.b, vocab, max_len))
        .collect::<Result<Vec<_>>>()?;
    pad_to_longest(&encoded, vocab.specials().pad)
}

/// Dev loss, predictions and metric in eval mode.
fn evaluate(
    task: &TaskSpec,
    model: &Model<f32>,
    head: &TaskHead<f32>,
    dev: &[FinetuneExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    max_len: usize,
) -> Result<(f64, Vec<LabelValue>, std::result::Result<f64, String>)> {
    let mut preds = Vec::with_capacity(dev.len());
    let mut total = 0.0;
    for (c, chunk) in dev.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&FinetuneExample> = chunk.iter().collect();
        let batch = pair_batch(&refs, vocab, max_len)?;
        let out = model.forward(&batch, Mode::Eval, MlmRows::None)?;
        let y = head.forward(&out.pooled);
        let labels: Vec<&LabelValue> = chunk.iter().map(|e| &e.label).collect();
        let t = targets_for(task.head_kind, &labels, c * cfg.batch_size)?;
        total += head.loss(&y, &t)?.loss as f64 * chunk.len() as f64;
        preds.extend(head.predict(&y));
    }
    let gold: Vec<LabelValue> = dev.iter().map(|e| e.label.clone()).collect();
    let metric = task.score(&gold, &preds).map_err(|e| e.to_string());
    Ok((total / dev.len() as f64, preds, metric))
}

/// Fine-tune encoder and a fresh head; keeps the epoch with the best dev
/// metric (ties and undefined metrics fall back to the lower dev loss).
pub fn finetune(
    task: &TaskSpec,
    train: &[FinetuneExample],
    dev: &[FinetuneExample],
    start: &Model<f32>,
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    task.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Data(format!("{}: empty train or dev split", task.name)));
    }
    if cfg.epochs == 0 || !(0.0..1.0).contains(&cfg.warmup_fraction) {
        return Err(Error::Config("epochs must be >= 1 and warmup_fraction in [0, 1)".into()));
    }
    check_labels(task, train, "train")?;
    check_labels(task, dev, "dev")?;

    let bs = cfg.train.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(bs);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = ((total as f64 * cfg.warmup_fraction).round() as usize).clamp(1, total);
    let tc = TrainConfig {
        total_steps: total,
        warmup_steps: warmup,
        ..cfg.train.clone()
    };
    tc.validate()?;
    let max_len = tc.max_seq_len.min(start.config.max_positions);

    let mut model = start.clone();
    let mut head = TaskHead::<f32>::init(task.head_kind, model.config.hidden_size, tc.seed ^ HEAD_SALT)?;
    let mut enc_state = AdamState::new(&model.params);
    let mut head_state = AdamState::new(&head.params);

    let mut records = Vec::new();
    let mut best: Option<(f64, f64, usize, Model<f32>, TaskHead<f32>, Vec<LabelValue>)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut example_rng(tc.seed ^ SHUFFLE_SALT, epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            step += 1;
            let exs: Vec<&FinetuneExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = pair_batch(&exs, vocab, max_len)?;
            let out = model.forward(
                &batch,
                Mode::Train {
                    seed: dropout_seed(tc.seed, step),
                },
                MlmRows::None,
            )?;
            let y = head.forward(&out.pooled);
            let labels: Vec<&LabelValue> = exs.iter().map(|e| &e.label).collect();
            let targets = targets_for(task.head_kind, &labels, 0)?;
            let l = head.loss(&y, &targets)?;
            if !l.loss.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("{} training loss", task.name),
                });
            }
            loss_sum += l.loss as f64 * exs.len() as f64;
            let (mut hg, d_pooled) = head.backward(&out.pooled, &l.grad);
            let mut g = model.backward(
                &out,
                OutputGrads {
                    pooled: Some(&d_pooled),
                    ..Default::default()
                },
            )?;
            g.extend(hg.clone());
            clip_gradients(&mut g, tc.clip_norm);
            hg = g.split_prefix("head.");
            let lr = lr_at(step, &tc)?;
            adamw_step(&mut model.params, &g, &mut enc_state, step, lr, &tc)?;
            adamw_step(&mut head.params, &hg, &mut head_state, step, lr, &tc)?;
        }
        let (dev_loss, preds, metric) = evaluate(task, &model, &head, dev, vocab, &tc, max_len)?;
        log::info!(
            "{} epoch {epoch}: train loss {:.5}, dev loss {dev_loss:.5}, {} {}",
            task.name,
            loss_sum / train.len() as f64,
            task.metric.name(),
            match &metric {
                Ok(v) => format!("{v:.4}"),
                Err(e) => e.clone(),
            }
        );
        let key = metric.as_ref().copied().unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((bk, bl, ..)) => key > *bk || (key == *bk && dev_loss < *bl),
        };
        if better {
            best = Some((key, dev_loss, epoch, model.clone(), head.clone(), preds));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            dev_loss,
            dev_metric: metric,
        });
    }
    let (_, _, best_epoch, model, head, dev_predictions) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        model,
        head,
        best_epoch,
        epochs: records,
        dev_predictions,
    })
}
