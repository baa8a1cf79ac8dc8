//! Task heads on top of the pooled `[CLS]` vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{mse, sigmoid_bce, softmax_cross_entropy, LossOutput};
use super::tensor::{linear, linear_backward, Real, Tensor};
use super::{truncated_normal, Params, INIT_STD};
use crate::error::{Error, Result};

pub const HEAD_WEIGHT: &str = "head.output.weight";
pub const HEAD_BIAS: &str = "head.output.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    SingleClass(usize),
    PairClass(usize),
    MultiLabel(usize),
    Regression,
}

impl HeadKind {
    pub fn output_dim(self) -> usize {
        match self {
            HeadKind::SingleClass(k) | HeadKind::PairClass(k) | HeadKind::MultiLabel(k) => k,
            HeadKind::Regression => 1,
        }
    }
}

/// Gold labels for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Label-id set per example.
    MultiLabel(Vec<Vec<usize>>),
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(v) => v.len(),
            Targets::MultiLabel(v) => v.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One example's label: gold, or decoded from head outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelValue {
    Class(usize),
    Labels(Vec<usize>),
    Value(f64),
}

pub const MULTI_LABEL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead<T> {
    pub kind: HeadKind,
    pub hidden_size: usize,
    pub params: Params<T>,
}

impl<T: Real> TaskHead<T> {
    pub fn init(kind: HeadKind, hidden_size: usize, seed: u64) -> Result<Self> {
        let k = kind.output_dim();
        if k == 0 || matches!(kind, HeadKind::SingleClass(1) | HeadKind::PairClass(1)) {
            return Err(Error::Config(format!("{kind:?} has no usable label space")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..hidden_size * k)
            .map(|_| T::lit(truncated_normal(&mut rng, INIT_STD)))
            .collect();
        let mut params = Params::new();
        params.insert(HEAD_WEIGHT, Tensor::from_vec(&[hidden_size, k], w));
        params.insert(HEAD_BIAS, Tensor::zeros(&[k]));
        Ok(Self {
            kind,
            hidden_size,
            params,
        })
    }

    pub fn from_params(kind: HeadKind, params: Params<T>) -> Result<Self> {
        let k = kind.output_dim();
        let w = params.get(HEAD_WEIGHT).ok_or_else(|| Error::CheckpointTensor {
            name: HEAD_WEIGHT.into(),
            message: "missing".into(),
        })?;
        let hidden_size = w.shape[0];
        if w.shape != [hidden_size, k] || params.get(HEAD_BIAS).map(|b| b.shape.clone()) != Some(vec![k]) {
            return Err(Error::CheckpointTensor {
                name: HEAD_WEIGHT.into(),
                message: format!("head shapes do not fit {kind:?}"),
            });
        }
        Ok(Self {
            kind,
            hidden_size,
            params,
        })
    }

    /// Raw outputs `[batch, k]` from pooled vectors `[batch, hidden]`.
    pub fn forward(&self, pooled: &[T]) -> Vec<T> {
        let n = pooled.len() / self.hidden_size;
        linear(
            pooled,
            self.params.data(HEAD_WEIGHT),
            self.params.data(HEAD_BIAS),
            n,
            self.hidden_size,
            self.kind.output_dim(),
        )
    }

    /// Head gradients and the gradient with respect to `pooled`.
    pub fn backward(&self, pooled: &[T], d_out: &[T]) -> (Params<T>, Vec<T>) {
        let k = self.kind.output_dim();
        let n = pooled.len() / self.hidden_size;
        let mut g = self.params.zeros_like();
        let mut dw = vec![T::zero(); self.hidden_size * k];
        let mut db = vec![T::zero(); k];
        let d_pooled = linear_backward(
            pooled,
            self.params.data(HEAD_WEIGHT),
            d_out,
            n,
            self.hidden_size,
            k,
            &mut dw,
            &mut db,
        );
        g.accumulate(HEAD_WEIGHT, &dw);
        g.accumulate(HEAD_BIAS, &db);
        (g, d_pooled)
    }

    /// Checks targets against the label space; errors carry the row index.
    pub fn check_targets(&self, targets: &Targets) -> Result<()> {
        let k = self.kind.output_dim();
        match (self.kind, targets) {
            (HeadKind::SingleClass(_) | HeadKind::PairClass(_), Targets::Classes(c)) => {
                if let Some((i, l)) = c.iter().enumerate().find(|(_, &l)| l >= k) {
                    return Err(Error::Data(format!("row {i}: label {l} outside 0..{k}")));
                }
            }
            (HeadKind::MultiLabel(_), Targets::MultiLabel(sets)) => {
                for (i, s) in sets.iter().enumerate() {
                    if let Some(l) = s.iter().find(|&&l| l >= k) {
                        return Err(Error::Data(format!("row {i}: label {l} outside 0..{k}")));
                    }
                }
            }
            (HeadKind::Regression, Targets::Real(v)) => {
                if let Some((i, x)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                    return Err(Error::Data(format!("row {i}: target {x} is not finite")));
                }
            }
            (kind, _) => {
                return Err(Error::Data(format!("targets do not match head {kind:?}")));
            }
        }
        Ok(())
    }

    /// Task loss: cross-entropy, per-label BCE, or MSE on the raw output.
    pub fn loss(&self, outputs: &[T], targets: &Targets) -> Result<LossOutput<T>> {
        self.check_targets(targets)?;
        let k = self.kind.output_dim();
        if outputs.len() != targets.len() * k {
            return Err(Error::Shape(format!(
                "{} head outputs for {} targets",
                outputs.len(),
                targets.len()
            )));
        }
        match targets {
            Targets::Classes(c) => {
                let t: Vec<Option<usize>> = c.iter().map(|&l| Some(l)).collect();
                Ok(softmax_cross_entropy(outputs, k, &t)?.0)
            }
            Targets::MultiLabel(sets) => {
                let mut flat = vec![false; sets.len() * k];
                for (i, s) in sets.iter().enumerate() {
                    for &l in s {
                        flat[i * k + l] = true;
                    }
                }
                sigmoid_bce(outputs, &flat)
            }
            Targets::Real(v) => {
                let t: Vec<T> = v.iter().map(|&x| T::lit(x)).collect();
                mse(outputs, &t)
            }
        }
    }

    /// Argmax, sigmoid > 0.5, or the output clamped to [0, 1].
    pub fn predict(&self, outputs: &[T]) -> Vec<LabelValue> {
        let k = self.kind.output_dim();
        outputs
            .chunks(k)
            .map(|row| match self.kind {
                HeadKind::SingleClass(_) | HeadKind::PairClass(_) => {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    LabelValue::Class(best)
                }
                HeadKind::MultiLabel(_) => LabelValue::Labels(
                    row.iter()
                        .enumerate()
                        .filter(|(_, &z)| 1.0 / (1.0 + (-z.as_f64()).exp()) > MULTI_LABEL_THRESHOLD)
                        .map(|(i, _)| i)
                        .collect(),
                ),
                HeadKind::Regression => LabelValue::Value(row[0].as_f64().clamp(0.0, 1.0)),
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> TaskHead<U> {
        TaskHead {
            kind: self.kind,
            hidden_size: self.hidden_size,
            params: self.params.cast(),
        }
    }
}
