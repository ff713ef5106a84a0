//! Softmax cross-entropy with label smoothing.
//!
//! The loss is not a layer: it takes logits and integer labels and returns
//! the scalar loss together with the softmax probabilities, from which the
//! logit gradient is formed. With smoothing `e` the target distribution is
//! `e / k` everywhere plus `1 - e` at the true class, so the minimum
//! achievable loss is the entropy of that smoothed target rather than zero.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(logits: &Tensor, labels: &[u32], smoothing: f32) -> Result<(usize, usize)> {
    let &[batch, classes] = logits.shape() else {
        return Err(Error::Dimension(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != batch {
        return Err(Error::Dimension(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!(
            "label smoothing {smoothing} outside [0, 1)"
        )));
    }
    Ok((batch, classes))
}

/// Mean smoothed cross-entropy over the batch, plus the softmax
/// probabilities (needed for the gradient). Row reductions run in f64.
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[u32],
    smoothing: f32,
) -> Result<(f64, Tensor)> {
    let (batch, classes) = check(logits, labels, smoothing)?;
    let e = smoothing as f64;
    let mut probs = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (b, row) in logits.data().chunks_exact(classes).enumerate() {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut z = 0.0f64;
        for &v in row {
            z += (v as f64 - max).exp();
        }
        let logz = z.ln();
        let mut row_loss = 0.0f64;
        let label = labels[b] as usize;
        for (k, &v) in row.iter().enumerate() {
            let logp = (v as f64 - max) - logz;
            probs[b * classes + k] = logp.exp() as f32;
            let mut target = e / classes as f64;
            if k == label {
                target += 1.0 - e;
            }
            row_loss -= target * logp;
        }
        total += row_loss;
    }
    Ok((
        total / batch as f64,
        Tensor::new(vec![batch, classes], probs)?,
    ))
}

/// Gradient of the mean smoothed cross-entropy with respect to the logits:
/// `(softmax - smoothed_target) / batch`.
pub fn softmax_cross_entropy_grad(
    probs: &Tensor,
    labels: &[u32],
    smoothing: f32,
) -> Result<Tensor> {
    let (batch, classes) = check(probs, labels, smoothing)?;
    let e = smoothing as f64;
    let uniform = e / classes as f64;
    let scale = 1.0 / batch as f64;
    let mut grad = vec![0.0f32; probs.len()];
    for (b, row) in probs.data().chunks_exact(classes).enumerate() {
        let label = labels[b] as usize;
        for (k, &p) in row.iter().enumerate() {
            let mut target = uniform;
            if k == label {
                target += 1.0 - e;
            }
            grad[b * classes + k] = ((p as f64 - target) * scale) as f32;
        }
    }
    Tensor::new(vec![batch, classes], grad)
}

/// Entropy of the smoothed target distribution: the floor beneath the
/// smoothed cross-entropy loss.
pub fn smoothed_loss_floor(classes: usize, smoothing: f32) -> f64 {
    let e = smoothing as f64;
    let k = classes as f64;
    let off = e / k;
    let on = 1.0 - e + off;
    let mut h = 0.0;
    if on > 0.0 {
        h -= on * on.ln();
    }
    if off > 0.0 {
        h -= (k - 1.0) * off * off.ln();
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros(&[4, 10]).unwrap();
        let labels = [0u32, 3, 7, 9];
        let (loss, probs) = softmax_cross_entropy(&logits, &labels, 0.0).unwrap();
        assert!((loss - (10.0f64).ln()).abs() < 1e-9);
        for &p in probs.data() {
            assert!((p - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn grad_rows_sum_to_zero() {
        let logits = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3]).unwrap();
        let labels = [2u32, 0];
        let (_, probs) = softmax_cross_entropy(&logits, &labels, 0.1).unwrap();
        let grad = softmax_cross_entropy_grad(&probs, &labels, 0.1).unwrap();
        for row in grad.data().chunks_exact(3) {
            let s: f32 = row.iter().sum();
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn floor_matches_direct_entropy() {
        // For e = 0 the floor is zero; a perfect prediction achieves it.
        assert!(smoothed_loss_floor(10, 0.0).abs() < 1e-12);
        // For e > 0 the floor is positive and below ln(k).
        let f = smoothed_loss_floor(10, 0.1);
        assert!(f > 0.0 && f < (10.0f64).ln());
    }

    #[test]
    fn rejects_bad_labels_and_smoothing() {
        let logits = Tensor::zeros(&[2, 3]).unwrap();
        assert!(softmax_cross_entropy(&logits, &[0, 3], 0.0).is_err());
        assert!(softmax_cross_entropy(&logits, &[0], 0.0).is_err());
        assert!(softmax_cross_entropy(&logits, &[0, 1], 1.0).is_err());
    }
}
