//! Penalty-reduced focal loss for heatmaps and smooth L1 for regressions.
//!
//! Each loss has a `*_sum` form returning the unnormalized sum, its
//! normalizer and the gradient of the sum, so that callers can pool terms
//! across layers before normalizing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::LayerId;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Weight of center/corner regressions.
    pub reg: f64,
    /// Weight of corner offsets.
    pub off: f64,
    pub smooth_l1_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 2.0, beta: 4.0, reg: 1.0, off: 1.0, smooth_l1_delta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoss {
    pub id: LayerId,
    pub heat: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub heat_loss: f64,
    /// Weighted sum of regression and offset terms.
    pub reg_loss: f64,
    pub total: f64,
    pub per_layer: Vec<LayerLoss>,
    /// Positive heatmap cells, floored at 1.
    pub normalizer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSum {
    pub sum: f64,
    /// Positive cells for focal terms, masked elements for smooth L1.
    pub count: usize,
    pub grad: Vec<f64>,
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("prediction has {a} elements, target {b}")));
    }
    Ok(())
}

/// Unnormalized focal sum over probabilities.
pub fn focal_sum(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<LossSum> {
    check_len(pred.len(), target.len())?;
    check_finite(pred, "focal prediction")?;
    check_finite(target, "focal target")?;
    let mut sum = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (&p_raw, &y)) in pred.iter().zip(target).enumerate() {
        let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let inside = p == p_raw;
        if y == 1.0 {
            count += 1;
            let q = 1.0 - p;
            sum -= q.powf(alpha) * p.ln();
            if inside {
                grad[i] = alpha * q.powf(alpha - 1.0) * p.ln() - q.powf(alpha) / p;
            }
        } else {
            let w = (1.0 - y).powf(beta);
            sum -= w * p.powf(alpha) * (1.0 - p).ln();
            if inside {
                grad[i] = -w * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p));
            }
        }
    }
    Ok(LossSum { sum, count, grad })
}

/// Penalty-reduced focal loss normalized by the positive count (floored at 1).
/// Returns the loss and its gradient with respect to `pred`.
pub fn focal_heatmap(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    let s = focal_sum(pred, target, alpha, beta)?;
    let n = s.count.max(1) as f64;
    Ok((s.sum / n, s.grad.into_iter().map(|g| g / n).collect()))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal sum evaluated on logits (`p = sigmoid(z)`), with the gradient taken
/// with respect to the logits. Identical to [`focal_sum`] composed with the
/// sigmoid away from the clamp, and numerically stable for large `|z|`.
pub fn focal_sum_logits(logits: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<LossSum> {
    check_len(logits.len(), target.len())?;
    check_finite(logits, "focal logits")?;
    check_finite(target, "focal target")?;
    let mut sum = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; logits.len()];
    for (i, (&z, &y)) in logits.iter().zip(target).enumerate() {
        let p = sigmoid(z);
        let q = sigmoid(-z);
        let log_p = -softplus(-z);
        let log_q = -softplus(z);
        if y == 1.0 {
            count += 1;
            sum -= q.powf(alpha) * log_p;
            grad[i] = alpha * q.powf(alpha) * p * log_p - q.powf(alpha + 1.0);
        } else {
            let w = (1.0 - y).powf(beta);
            sum -= w * p.powf(alpha) * log_q;
            grad[i] = -w * (alpha * p.powf(alpha) * q * log_q - p.powf(alpha + 1.0));
        }
    }
    Ok(LossSum { sum, count, grad })
}

/// Unnormalized smooth L1 over masked elements.
pub fn smooth_l1_sum(pred: &[f64], target: &[f64], mask: &[bool], delta: f64) -> Result<LossSum> {
    check_len(pred.len(), target.len())?;
    check_len(pred.len(), mask.len())?;
    check_finite(pred, "smooth L1 prediction")?;
    let mut sum = 0.0;
    let mut count = 0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        if !target[i].is_finite() {
            return Err(Error::NonFinite("smooth L1 target"));
        }
        count += 1;
        let x = pred[i] - target[i];
        if x.abs() < delta {
            sum += 0.5 * x * x / delta;
            grad[i] = x / delta;
        } else {
            sum += x.abs() - 0.5 * delta;
            grad[i] = x.signum();
        }
    }
    Ok(LossSum { sum, count, grad })
}

/// Smooth L1 averaged over masked elements (at least 1). An empty mask gives
/// zero loss and zero gradient.
pub fn smooth_l1(pred: &[f64], target: &[f64], mask: &[bool], delta: f64) -> Result<(f64, Vec<f64>)> {
    let s = smooth_l1_sum(pred, target, mask, delta)?;
    let n = s.count.max(1) as f64;
    Ok((s.sum / n, s.grad.into_iter().map(|g| g / n).collect()))
}

/// Repeats a per-cell mask over `channels` planes.
pub fn expand_mask(cell_mask: &[bool], channels: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(cell_mask.len() * channels);
    for _ in 0..channels {
        out.extend_from_slice(cell_mask);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_hand_values() {
        let (l, _) = focal_heatmap(&[0.5], &[1.0], 2.0, 4.0).unwrap();
        assert!((l - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.17329).abs() < 1e-5);
        let s = focal_sum(&[0.5], &[0.5], 2.0, 4.0).unwrap();
        assert!((s.sum - 0.0625 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((s.sum - 0.01083).abs() < 1e-5);
        let (l, _) = focal_heatmap(&[1.0 - 1e-12], &[1.0], 2.0, 4.0).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn focal_rejects_nan() {
        assert!(matches!(focal_heatmap(&[f64::NAN], &[1.0], 2.0, 4.0), Err(Error::NonFinite(_))));
        assert!(focal_heatmap(&[0.5, 0.5], &[1.0], 2.0, 4.0).is_err());
    }

    #[test]
    fn logit_form_agrees_with_probability_form() {
        let z = [-3.0, -0.4, 0.0, 0.7, 2.5];
        let y = [1.0, 0.3, 0.0, 1.0, 0.9];
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let a = focal_sum(&p, &y, 2.0, 4.0).unwrap();
        let b = focal_sum_logits(&z, &y, 2.0, 4.0).unwrap();
        assert!((a.sum - b.sum).abs() < 1e-12);
        for i in 0..z.len() {
            assert!((a.grad[i] * p[i] * (1.0 - p[i]) - b.grad[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_form_is_stable_at_extremes() {
        let s = focal_sum_logits(&[-800.0, 800.0], &[1.0, 0.0], 2.0, 4.0).unwrap();
        assert!(s.sum.is_finite() && s.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn smooth_l1_values() {
        let m = [true];
        assert_eq!(smooth_l1(&[0.0], &[0.0], &m, 1.0).unwrap().0, 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0], &m, 1.0).unwrap().0, 0.125);
        assert_eq!(smooth_l1(&[2.0], &[0.0], &m, 1.0).unwrap().0, 1.5);
        let (l, g) = smooth_l1(&[3.0, 4.0], &[0.0, 0.0], &[false, false], 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn smooth_l1_ignores_unmasked_nan_targets() {
        assert!(smooth_l1(&[1.0, 2.0], &[f64::NAN, 2.0], &[false, true], 1.0).is_ok());
        assert!(smooth_l1(&[1.0], &[f64::NAN], &[true], 1.0).is_err());
    }
}
