//! BERT-style encoder: configuration, named parameters, forward and analytic
//! backward passes, task heads, checkpoints and layer truncation.
//!
//! Architecture is post-layer-norm: token + position + segment embeddings,
//! then per layer multi-head self-attention and a GELU feed-forward block,
//! each followed by residual add and layer norm. The MLM output projection is
//! tied to the token embedding matrix and has its own bias.

pub mod checkpoint;
pub mod encoder;
pub mod head;
pub mod loss;
pub mod tensor;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with, save_checkpoint, truncate, Checkpoint, ManifestEntry,
    FORMAT_VERSION,
};
pub use encoder::{ForwardCache, ForwardOutput, MlmRows, Mode, OutputGrads};
pub use head::{HeadKind, LabelValue, TaskHead, Targets};
pub use loss::{mlm_loss, LossOutput, MlmLoss};
pub use tensor::{Real, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub num_segments: usize,
    pub dropout_prob: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_size: 128,
            num_heads: 4,
            ff_size: 512,
            vocab_size: 64_000,
            max_positions: 256,
            num_segments: 2,
            dropout_prob: 0.1,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ff_size", self.ff_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("num_segments", self.num_segments),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!(
                "dropout_prob {} outside [0, 1)",
                self.dropout_prob
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Canonical `key=value` rendering used in checkpoint headers.
    pub fn to_canonical_text(&self) -> String {
        format!(
            "num_layers={}\nhidden_size={}\nnum_heads={}\nff_size={}\nvocab_size={}\n\
             max_positions={}\nnum_segments={}\ndropout_prob={:?}\nlayer_norm_eps={:?}\n",
            self.num_layers,
            self.hidden_size,
            self.num_heads,
            self.ff_size,
            self.vocab_size,
            self.max_positions,
            self.num_segments,
            self.dropout_prob,
            self.layer_norm_eps
        )
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            let bad = || Error::Checkpoint(format!("bad value for {k}: `{v}`"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            let float = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "num_layers" => cfg.num_layers = int()?,
                "hidden_size" => cfg.hidden_size = int()?,
                "num_heads" => cfg.num_heads = int()?,
                "ff_size" => cfg.ff_size = int()?,
                "vocab_size" => cfg.vocab_size = int()?,
                "max_positions" => cfg.max_positions = int()?,
                "num_segments" => cfg.num_segments = int()?,
                "dropout_prob" => cfg.dropout_prob = float()?,
                "layer_norm_eps" => cfg.layer_norm_eps = float()?,
                _ => return Err(Error::Checkpoint(format!("unknown config key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(Error::Checkpoint(format!(
                "config header has {seen} keys, expected 9"
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("layers.{i}.")
}

/// Layer index of a per-layer parameter name.
pub fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

fn layer_shapes(i: usize, h: usize, f: usize) -> Vec<(String, Vec<usize>)> {
    let p = layer_prefix(i);
    let mut v = Vec::new();
    for m in ["query", "key", "value", "output"] {
        v.push((format!("{p}attention.{m}.weight"), vec![h, h]));
        v.push((format!("{p}attention.{m}.bias"), vec![h]));
    }
    v.push((format!("{p}attention.layer_norm.gain"), vec![h]));
    v.push((format!("{p}attention.layer_norm.bias"), vec![h]));
    v.push((format!("{p}ffn.intermediate.weight"), vec![h, f]));
    v.push((format!("{p}ffn.intermediate.bias"), vec![f]));
    v.push((format!("{p}ffn.output.weight"), vec![f, h]));
    v.push((format!("{p}ffn.output.bias"), vec![h]));
    v.push((format!("{p}ffn.layer_norm.gain"), vec![h]));
    v.push((format!("{p}ffn.layer_norm.bias"), vec![h]));
    v
}

/// Every encoder parameter name with its shape, in canonical order.
pub fn canonical_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_size;
    let mut v = vec![
        ("embeddings.word.weight".to_string(), vec![cfg.vocab_size, h]),
        ("embeddings.position.weight".to_string(), vec![cfg.max_positions, h]),
        ("embeddings.segment.weight".to_string(), vec![cfg.num_segments, h]),
        ("embeddings.layer_norm.gain".to_string(), vec![h]),
        ("embeddings.layer_norm.bias".to_string(), vec![h]),
    ];
    for i in 0..cfg.num_layers {
        v.extend(layer_shapes(i, h, cfg.ff_size));
    }
    v.extend([
        ("pooler.dense.weight".to_string(), vec![h, h]),
        ("pooler.dense.bias".to_string(), vec![h]),
        ("mlm.transform.weight".to_string(), vec![h, h]),
        ("mlm.transform.bias".to_string(), vec![h]),
        ("mlm.layer_norm.gain".to_string(), vec![h]),
        ("mlm.layer_norm.bias".to_string(), vec![h]),
        ("mlm.output.bias".to_string(), vec![cfg.vocab_size]),
    ]);
    v
}

pub fn parameter_count(cfg: &ModelConfig) -> usize {
    canonical_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Parameters excluded from weight decay: biases and layer-norm gains.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gain")
}

/// Named tensors; also used for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    /// Data of a parameter known to exist.
    pub fn data(&self, name: &str) -> &[T] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .data
    }

    /// Add `delta` into the named tensor.
    pub fn accumulate(&mut self, name: &str, delta: &[T]) {
        let t = self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"));
        tensor::add_assign(&mut t.data, delta);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors.values_mut() {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    /// Merge another set in; names must not collide.
    pub fn extend(&mut self, other: Params<T>) {
        for (k, v) in other.tensors {
            let prev = self.tensors.insert(k.clone(), v);
            assert!(prev.is_none(), "duplicate parameter `{k}`");
        }
    }

    /// Split off every tensor whose name starts with `prefix`.
    pub fn split_prefix(&mut self, prefix: &str) -> Params<T> {
        let names: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        let mut out = Params::new();
        for n in names {
            let t = self.tensors.remove(&n).expect("listed");
            out.insert(n, t);
        }
        out
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| t.data.iter().any(|v| !v.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}

/// Sample from N(0, std^2) truncated to two standard deviations.
pub(crate) fn truncated_normal<R: rand::Rng>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("valid std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Encoder parameters with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Real> Model<T> {
    /// Fresh weights: truncated N(0, 0.02) matrices, zero biases, unit
    /// layer-norm gains. Deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape) in canonical_shapes(config) {
            let t = if name.ends_with(".gain") {
                Tensor::filled(&shape, T::one())
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let n = shape.iter().product();
                let data = (0..n)
                    .map(|_| T::lit(truncated_normal(&mut rng, INIT_STD)))
                    .collect();
                Tensor::from_vec(&shape, data)
            };
            params.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }
}

/// Exact match of names and shapes against the canonical scheme.
pub fn check_params<T: Real>(cfg: &ModelConfig, params: &Params<T>) -> Result<()> {
    let expected = canonical_shapes(cfg);
    for (name, shape) in &expected {
        match params.get(name) {
            None => {
                return Err(Error::CheckpointTensor {
                    name: name.clone(),
                    message: "missing".into(),
                })
            }
            Some(t) if &t.shape != shape => {
                return Err(Error::CheckpointTensor {
                    name: name.clone(),
                    message: format!("shape {:?}, expected {:?}", t.shape, shape),
                })
            }
            Some(_) => {}
        }
    }
    if params.len() != expected.len() {
        let known: std::collections::HashSet<&String> = expected.iter().map(|(n, _)| n).collect();
        let extra = params.names().find(|n| !known.contains(n)).cloned().unwrap_or_default();
        return Err(Error::CheckpointTensor {
            name: extra,
            message: "not part of the canonical naming scheme".into(),
        });
    }
    Ok(())
}
