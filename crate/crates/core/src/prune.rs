//! Group-wise n-of-m pruning along the channel dimension.
//!
//! A gradient tensor is cut into contiguous groups of `m` channels (channels
//! are the trailing, stride-1 axis, so a group is a contiguous slice). Within
//! each group exactly `n` positions are kept and the rest are zeroed. Three
//! selection rules are provided:
//!
//! - `Random`: a uniformly random n-subset per group, keyed on the seed and
//!   the group's linear index only, so the mask never depends on values or
//!   on pruning order.
//! - `Magnitude`: the n positions of largest absolute value; ties keep the
//!   lower index.
//! - `RescaledMagnitude`: magnitude selection followed by a scalar rescale
//!   that restores the L1 norm the gradient had before pruning. The default
//!   scope restores each channel's L1 norm across all rows (batch and
//!   spatial positions); a group-level scope is available as an option.
//!
//! Pruning always returns a new tensor and never modifies its input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Largest supported group size.
pub const MAX_GROUP_SIZE: usize = 32;

/// Selection rule for the kept positions of each group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneFunction {
    Random,
    Magnitude,
    RescaledMagnitude,
}

/// What the rescaled-magnitude correction normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleScope {
    /// Restore each channel's L1 norm, summed over every row of the tensor.
    #[default]
    Channel,
    /// Restore each m-group's own L1 norm.
    Group,
}

/// Full description of one pruning scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub function: PruneFunction,
    /// Kept positions per group.
    pub n: usize,
    /// Group size; must divide the channel count of pruned tensors.
    pub m: usize,
    /// Seed for `Random` masks; ignored by the magnitude rules.
    #[serde(default)]
    pub seed: u64,
    /// Scope of the `RescaledMagnitude` correction.
    #[serde(default)]
    pub rescale: RescaleScope,
}

impl PruneConfig {
    pub fn new(function: PruneFunction, n: usize, m: usize) -> Self {
        PruneConfig {
            function,
            n,
            m,
            seed: 0,
            rescale: RescaleScope::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n > self.m || self.m > MAX_GROUP_SIZE {
            return Err(Error::Config(format!(
                "prune pattern {}:{} out of range (need 1 <= n <= m <= {MAX_GROUP_SIZE})",
                self.n, self.m
            )));
        }
        Ok(())
    }

    /// Sparsity ratio `r = m / n`.
    pub fn sparsity_ratio(&self) -> f64 {
        self.m as f64 / self.n as f64
    }
}

/// Kept positions of one group: exactly the selected indices, ascending,
/// each in `[0, m)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupMask {
    m: usize,
    kept: Vec<usize>,
}

impl GroupMask {
    pub fn new(m: usize, kept: Vec<usize>) -> Result<Self> {
        if m < 1 || m > MAX_GROUP_SIZE {
            return Err(Error::Config(format!("group size {m} out of range")));
        }
        if kept.is_empty() || kept.len() > m {
            return Err(Error::Config(format!(
                "mask keeps {} of {m} positions",
                kept.len()
            )));
        }
        if kept.windows(2).any(|w| w[0] >= w[1]) || *kept.last().unwrap() >= m {
            return Err(Error::Config(format!(
                "mask indices {kept:?} not strictly ascending within [0, {m})"
            )));
        }
        Ok(GroupMask { m, kept })
    }

    fn from_bits(m: usize, bits: u32) -> Self {
        let kept = (0..m).filter(|i| bits & (1 << i) != 0).collect();
        GroupMask { m, kept }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn contains(&self, index: usize) -> bool {
        self.kept.contains(&index)
    }

    /// Zeroes every position of `group` not in the mask.
    pub fn apply(&self, group: &mut [f32]) {
        assert_eq!(group.len(), self.m, "group length mismatch");
        let mut next = self.kept.iter().peekable();
        for (i, v) in group.iter_mut().enumerate() {
            if next.peek() == Some(&&i) {
                next.next();
            } else {
                *v = 0.0;
            }
        }
    }
}

fn check_group(group: &[f32], n: usize) -> Result<()> {
    let m = group.len();
    if m < 1 || m > MAX_GROUP_SIZE {
        return Err(Error::Config(format!("group size {m} out of range")));
    }
    if n < 1 || n > m {
        return Err(Error::Config(format!("cannot keep {n} of {m} positions")));
    }
    if group.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("group contains non-finite values".into()));
    }
    Ok(())
}

/// Keep-set bitmask of the `n` largest-magnitude positions; ties keep the
/// lower index. Sorting key is (-|v|, index), so the order is total and the
/// selection is unique.
fn magnitude_bits(group: &[f32], n: usize) -> u32 {
    let m = group.len();
    let mut order = [(0.0f32, 0u8); MAX_GROUP_SIZE];
    for (i, &v) in group.iter().enumerate() {
        order[i] = (-v.abs(), i as u8);
    }
    order[..m].sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut bits = 0u32;
    for &(_, i) in &order[..n] {
        bits |= 1 << i;
    }
    bits
}

/// Keep-set bitmask of a uniformly random n-subset of `[0, m)`, drawn by a
/// partial Fisher-Yates shuffle.
fn random_bits(m: usize, n: usize, rng: &mut CounterRng) -> u32 {
    let mut idx = [0u8; MAX_GROUP_SIZE];
    for (i, slot) in idx[..m].iter_mut().enumerate() {
        *slot = i as u8;
    }
    let mut bits = 0u32;
    for i in 0..n {
        let j = i + rng.next_below((m - i) as u64) as usize;
        idx.swap(i, j);
        bits |= 1 << idx[i];
    }
    bits
}

fn zero_unkept(group: &mut [f32], bits: u32) {
    for (i, v) in group.iter_mut().enumerate() {
        if bits & (1 << i) == 0 {
            *v = 0.0;
        }
    }
}

/// Magnitude keep-set of one group.
pub fn magnitude_keep_set(group: &[f32], n: usize) -> Result<GroupMask> {
    check_group(group, n)?;
    Ok(GroupMask::from_bits(group.len(), magnitude_bits(group, n)))
}

/// Random keep-set for a group of size `m`, drawn from `rng`.
pub fn random_keep_set(m: usize, n: usize, rng: &mut CounterRng) -> Result<GroupMask> {
    check_group(&vec![0.0; m], n)?;
    Ok(GroupMask::from_bits(m, random_bits(m, n, rng)))
}

/// Keeps the `n` largest-magnitude values of `group`, zeroing the rest.
/// Kept values pass through unchanged.
pub fn prune_group_magnitude(group: &[f32], n: usize) -> Result<Vec<f32>> {
    check_group(group, n)?;
    let mut out = group.to_vec();
    zero_unkept(&mut out, magnitude_bits(group, n));
    Ok(out)
}

/// Keeps a uniformly random n-subset of `group`, zeroing the rest. With
/// `n == group.len()` this is the identity regardless of the generator.
pub fn prune_group_random(group: &[f32], n: usize, rng: &mut CounterRng) -> Result<Vec<f32>> {
    check_group(group, n)?;
    let mut out = group.to_vec();
    if n < group.len() {
        zero_unkept(&mut out, random_bits(group.len(), n, rng));
    }
    Ok(out)
}

/// Prunes `grad` to n-of-m sparsity along its channel (trailing) dimension
/// and returns the pruned copy; `grad` itself is untouched.
///
/// Groups are the contiguous m-wide chunks of the flat buffer, numbered in
/// row-major order; this is well defined because the channel count must be
/// divisible by `m`. Random masks are keyed on `(cfg.seed, group index)`, so
/// the mask pattern is a pure function of the tensor shape and the seed.
/// With `n == m` every function degenerates to an exact copy.
pub fn sdgp(grad: &Tensor, cfg: &PruneConfig) -> Result<Tensor> {
    cfg.validate()?;
    let channels = grad.channels();
    if channels % cfg.m != 0 {
        return Err(Error::Config(format!(
            "channel dimension {channels} is not divisible by group size m={}",
            cfg.m
        )));
    }
    if cfg.n == cfg.m {
        return Ok(grad.clone());
    }

    let mut out = grad.data().to_vec();
    match cfg.function {
        PruneFunction::Random => {
            for (g, chunk) in out.chunks_exact_mut(cfg.m).enumerate() {
                let mut rng = CounterRng::keyed(cfg.seed, g as u64);
                zero_unkept(chunk, random_bits(cfg.m, cfg.n, &mut rng));
            }
        }
        PruneFunction::Magnitude | PruneFunction::RescaledMagnitude => {
            for chunk in out.chunks_exact_mut(cfg.m) {
                let bits = magnitude_bits(chunk, cfg.n);
                zero_unkept(chunk, bits);
            }
        }
    }

    if cfg.function == PruneFunction::RescaledMagnitude {
        match cfg.rescale {
            RescaleScope::Channel => rescale_per_channel(grad.data(), &mut out, channels),
            RescaleScope::Group => rescale_per_group(grad.data(), &mut out, cfg.m),
        }
    }

    Tensor::new(grad.shape().to_vec(), out)
}

/// Scales each channel (column) of the pruned buffer so its L1 norm over all
/// rows matches the dense buffer's. Channels whose pruned L1 is zero are
/// left untouched. Accumulation and scaling run in f64.
fn rescale_per_channel(dense: &[f32], pruned: &mut [f32], channels: usize) {
    let mut l1_dense = vec![0.0f64; channels];
    let mut l1_pruned = vec![0.0f64; channels];
    for (drow, prow) in dense.chunks_exact(channels).zip(pruned.chunks_exact(channels)) {
        for c in 0..channels {
            l1_dense[c] += drow[c].abs() as f64;
            l1_pruned[c] += prow[c].abs() as f64;
        }
    }
    let factor: Vec<f64> = l1_dense
        .iter()
        .zip(&l1_pruned)
        .map(|(&d, &p)| if p > 0.0 { d / p } else { 1.0 })
        .collect();
    for prow in pruned.chunks_exact_mut(channels) {
        for (v, &f) in prow.iter_mut().zip(&factor) {
            *v = (*v as f64 * f) as f32;
        }
    }
}

/// Scales each m-group of the pruned buffer so its own L1 norm matches the
/// dense buffer's. Groups whose pruned L1 is zero are left untouched.
fn rescale_per_group(dense: &[f32], pruned: &mut [f32], m: usize) {
    for (dchunk, pchunk) in dense.chunks_exact(m).zip(pruned.chunks_exact_mut(m)) {
        let d: f64 = dchunk.iter().map(|v| v.abs() as f64).sum();
        let p: f64 = pchunk.iter().map(|v| v.abs() as f64).sum();
        if p > 0.0 {
            let f = d / p;
            for v in pchunk.iter_mut() {
                *v = (*v as f64 * f) as f32;
            }
        }
    }
}

/// Histogram of nonzero counts per m-group: slot `k` counts the groups with
/// exactly `k` nonzero values. The returned vector has `m + 1` slots.
pub fn count_group_nonzeros(grad: &Tensor, m: usize) -> Result<Vec<u64>> {
    if m < 1 || m > MAX_GROUP_SIZE {
        return Err(Error::Config(format!("group size {m} out of range")));
    }
    let channels = grad.channels();
    if channels % m != 0 {
        return Err(Error::Config(format!(
            "channel dimension {channels} is not divisible by group size m={m}"
        )));
    }
    let mut hist = vec![0u64; m + 1];
    for chunk in grad.data().chunks_exact(m) {
        let nz = chunk.iter().filter(|v| **v != 0.0).count();
        hist[nz] += 1;
    }
    Ok(hist)
}
