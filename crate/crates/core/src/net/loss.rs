//! Cross-entropy with soft targets, loss thresholding and accuracy metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `-ln 0.2`: the adversary gains nothing once the true-class probability
/// drops below 0.2.
pub const DEFAULT_KAPPA: f32 = 1.609_438;

/// Label-smoothing coefficient used for training losses.
pub const DEFAULT_SMOOTHING: f32 = 0.1;

/// How a per-decision loss is formed from logits and labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Label-smoothing coefficient in `[0, 1)`.
    pub smoothing: f32,
    /// Per-decision cap on the cross-entropy; `None` disables thresholding.
    pub kappa: Option<f32>,
}

impl LossConfig {
    /// Smoothed, thresholded loss used during training.
    pub fn training() -> Self {
        Self {
            smoothing: DEFAULT_SMOOTHING,
            kappa: Some(DEFAULT_KAPPA),
        }
    }

    /// Hard labels with the default threshold; what evaluation attacks use.
    pub fn attack() -> Self {
        Self {
            smoothing: 0.0,
            kappa: Some(DEFAULT_KAPPA),
        }
    }

    /// Hard labels, no threshold.
    pub fn plain() -> Self {
        Self {
            smoothing: 0.0,
            kappa: None,
        }
    }

    pub fn without_threshold(self) -> Self {
        Self {
            kappa: None,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid("label smoothing must lie in [0, 1)"));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) || !k.is_finite() {
                return Err(invalid("kappa must be positive"));
            }
        }
        Ok(())
    }
}

/// Soft targets: `coeff / C` everywhere plus `1 - coeff` on the true class.
pub fn smooth_labels<T: Scalar>(labels: &[usize], classes: usize, coeff: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&coeff) {
        return Err(invalid("label smoothing must lie in [0, 1)"));
    }
    if classes == 0 {
        return Err(invalid("class count must be positive"));
    }
    let off = coeff / classes as f64;
    let on = 1.0 - coeff + off;
    let mut data = vec![T::from_f64(off); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(invalid("label out of range"));
        }
        data[i * classes + y] = T::from_f64(on);
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().fold(row[0], |m, &v| m.max(v));
    let mut sum = T::ZERO;
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - max - lse;
    }
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *logits.shape().last().ok_or(Error::Empty("logits"))?;
    let mut out = vec![T::ZERO; logits.len()];
    for (row, o) in logits.as_slice().chunks(c).zip(out.chunks_mut(c)) {
        log_softmax_row(row, o);
        for v in o.iter_mut() {
            *v = v.exp();
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

fn check_targets<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<usize> {
    let c = *logits.shape().last().ok_or(Error::Empty("logits"))?;
    if targets.len() != logits.len() || targets.shape().last() != Some(&c) {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    for row in targets.as_slice().chunks(c) {
        let s: f64 = row.iter().map(|v| v.to_f64()).sum();
        if (s - 1.0).abs() > 1e-5 || row.iter().any(|v| *v < T::ZERO) {
            return Err(invalid("target row is not a probability vector"));
        }
    }
    Ok(c)
}

/// Per-decision cross-entropy `-sum_c t_c log softmax(z)_c`. The last logit
/// axis indexes classes; every other axis enumerates decisions.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Vec<T>> {
    let c = check_targets(logits, targets)?;
    let mut logp = vec![T::ZERO; c];
    let losses = logits
        .as_slice()
        .chunks(c)
        .zip(targets.as_slice().chunks(c))
        .map(|(z, t)| {
            log_softmax_row(z, &mut logp);
            let mut l = T::ZERO;
            for (&tp, &lp) in t.iter().zip(&logp) {
                l -= tp * lp;
            }
            l.max(T::ZERO)
        })
        .collect::<Vec<_>>();
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok(losses)
}

/// Elementwise `min(L, kappa)`; identity when `kappa` is `None`.
pub fn adv_loss<T: Scalar>(losses: &[T], kappa: Option<T>) -> Result<Vec<T>> {
    match kappa {
        None => Ok(losses.to_vec()),
        Some(k) if k > T::ZERO => Ok(losses.iter().map(|&l| l.min(k)).collect()),
        Some(_) => Err(invalid("kappa must be positive")),
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = match logits.shape().last() {
        Some(&c) if c > 0 => c,
        _ => return Vec::new(),
    };
    logits
        .as_slice()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of decisions whose argmax equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let pred = argmax(logits);
    pixel_accuracy(&pred, labels)
}

/// Mean agreement between two label maps of equal length.
pub fn pixel_accuracy(pred: &[usize], target: &[usize]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![pred.len()],
            right: vec![target.len()],
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("label map"));
    }
    let hits = pred.iter().zip(target).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}
