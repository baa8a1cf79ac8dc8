//! Losses returning both the scalar value and the gradient of the logits.

use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    /// Same layout as the input predictions.
    pub grad: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmLoss<T> {
    pub loss: T,
    pub grad: Vec<T>,
    /// Positions that carried a label.
    pub scored: usize,
    /// Set when nothing was scored; `loss` is then 0 and `grad` all zeros.
    pub no_targets: bool,
}

/// Mean softmax cross-entropy over `rows` rows of `classes` logits.
/// Rows whose target is `None` are ignored.
pub fn softmax_cross_entropy<T: Real>(
    logits: &[T],
    classes: usize,
    targets: &[Option<usize>],
) -> Result<(LossOutput<T>, usize)> {
    if classes == 0 || logits.len() != targets.len() * classes {
        return Err(Error::Shape(format!(
            "{} logits for {} rows of {classes} classes",
            logits.len(),
            targets.len()
        )));
    }
    let scored = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = vec![T::zero(); logits.len()];
    if scored == 0 {
        return Ok((LossOutput { loss: T::zero(), grad }, 0));
    }
    let inv = T::one() / T::lit(scored as f64);
    let mut total = T::zero();
    for (r, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        if t >= classes {
            return Err(Error::Data(format!("target {t} outside {classes} classes at row {r}")));
        }
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[t];
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z - log_z).exp() * inv;
        }
        g[t] -= inv;
    }
    Ok((LossOutput { loss: total * inv, grad }, scored))
}

/// MLM cross-entropy over logits computed for `labels.len()` rows.
pub fn mlm_loss<T: Real>(
    logits: &[T],
    vocab_size: usize,
    labels: &[Option<u32>],
) -> Result<MlmLoss<T>> {
    let targets: Vec<Option<usize>> = labels.iter().map(|l| l.map(|v| v as usize)).collect();
    let (out, scored) = softmax_cross_entropy(logits, vocab_size, &targets)?;
    Ok(MlmLoss {
        loss: out.loss,
        grad: out.grad,
        scored,
        no_targets: scored == 0,
    })
}

/// Binary cross-entropy with logits, averaged over all `n * k` entries.
pub fn sigmoid_bce<T: Real>(logits: &[T], targets: &[bool]) -> Result<LossOutput<T>> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits for {} binary targets",
            logits.len(),
            targets.len()
        )));
    }
    let inv = T::one() / T::lit(logits.len() as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        let y = if y { T::one() } else { T::zero() };
        // log(1 + e^z) - y z, written to avoid overflow
        total += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        let s = T::one() / (T::one() + (-z).exp());
        grad.push((s - y) * inv);
    }
    Ok(LossOutput { loss: total * inv, grad })
}

/// Mean squared error.
pub fn mse<T: Real>(pred: &[T], target: &[T]) -> Result<LossOutput<T>> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let inv = T::one() / T::lit(pred.len() as f64);
    let two = T::lit(2.0);
    let mut total = T::zero();
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            total += (p - t) * (p - t);
            two * (p - t) * inv
        })
        .collect();
    Ok(LossOutput { loss: total * inv, grad })
}
