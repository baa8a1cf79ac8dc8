use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use cpt_core::model::ModelConfig;
use cpt_core::training::TrainConfig;

/// Encoder shape; flags override the config file, which overrides defaults.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model config file (TOML with ModelConfig fields)
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Transformer layers [default: 4]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Hidden size [default: 128]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Attention heads [default: 4]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Feed-forward inner size [default: 512]
    #[arg(long)]
    pub ff_size: Option<usize>,
    /// Maximum positions [default: 256]
    #[arg(long)]
    pub max_positions: Option<usize>,
    /// Dropout probability [default: 0.1]
    #[arg(long)]
    pub dropout: Option<f64>,
}

impl ModelArgs {
    /// Resolved config; the vocabulary size always comes from the vocab.
    pub fn resolve(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = match &self.model_config {
            Some(p) => {
                let text = read_text(p)?;
                toml::from_str::<ModelConfig>(&text)
                    .map_err(|e| cpt_core::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ModelConfig::default(),
        };
        set(&mut cfg.num_layers, self.layers);
        set(&mut cfg.hidden_size, self.hidden);
        set(&mut cfg.num_heads, self.heads);
        set(&mut cfg.ff_size, self.ff_size);
        set(&mut cfg.max_positions, self.max_positions);
        set(&mut cfg.dropout_prob, self.dropout);
        cfg.vocab_size = vocab_size;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimizer flags shared by pretraining and fine-tuning.
#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// Peak learning rate [default: 1e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Sentences per batch [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Maximum sequence length in tokens, specials included [default: 256]
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    /// Decoupled weight decay [default: 0.2]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Global gradient-norm clip [default: 0.1]
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Adam beta1 [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam beta2 [default: 0.98]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam epsilon [default: 1e-5]
    #[arg(long)]
    pub adam_eps: Option<f64>,
}

impl OptimArgs {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.base_lr, self.lr);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.max_seq_len, self.max_seq_len);
        set(&mut cfg.weight_decay, self.weight_decay);
        set(&mut cfg.clip_norm, self.clip_norm);
        set(&mut cfg.beta1, self.beta1);
        set(&mut cfg.beta2, self.beta2);
        set(&mut cfg.eps, self.adam_eps);
    }
}

pub fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    String::from_utf8(bytes).map_err(|e| {
        let valid = e.utf8_error().valid_up_to();
        let line = e.as_bytes()[..valid].iter().filter(|&&b| b == b'\n').count() + 1;
        cpt_core::Error::InvalidUtf8 {
            path: path.to_path_buf(),
            line,
        }
        .into()
    })
}

/// Non-empty lines of a UTF-8 file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
