//! Central finite differences for verifying analytic gradients.
//!
//! `numerical_grad` perturbs one element at a time of a tensor and evaluates
//! a scalar loss closure at `x + eps` and `x - eps`. The closure owns all
//! other state (it typically clones a network, installs the candidate
//! tensor, and runs forward plus loss), so the same helper checks parameter
//! gradients and input gradients alike.

use crate::error::Result;
use crate::tensor::Tensor;

/// Central-difference gradient of `f` at `x`, element by element.
pub fn numerical_grad(
    x: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    eps: f32,
) -> Result<Vec<f64>> {
    assert!(eps > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps as f64));
    }
    Ok(grad)
}

/// Worst relative disagreement between an analytic gradient and a numeric
/// one. Each element is compared as `|a - n| / max(floor, |a|, |n|)`; the
/// floor keeps near-zero entries from blowing up the ratio at the finite
/// difference's own resolution.
pub fn max_relative_error(analytic: &[f32], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    assert!(floor > 0.0, "floor must be positive");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let a = a as f64;
        let denom = floor.max(a.abs()).max(n.abs());
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
