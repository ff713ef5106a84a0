//! Wall-clock profiling of conv layers and the analytic speedup model.
//!
//! Pruning the data gradient can only save work in the backward-data phase
//! of conv layers, so the model rests on one measured number: the fraction
//! `f` of recorded conv time spent computing data gradients. An n:m pattern
//! with sparsity ratio `r = m/n` shrinks that share to `f / r`, cutting
//! total recorded time by `f * (1 - 1/r)`. Profiles record conv layers only
//! (the phase split is meaningless elsewhere) and take medians over repeated
//! single-threaded runs of the dense pass.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Mode, Network, add};
use crate::prune::MAX_GROUP_SIZE;
use crate::tensor::Tensor;
use crate::train::EpochMetric;

/// Median wall seconds of one conv layer's three phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub layer: String,
    pub forward_s: f64,
    pub backward_data_s: f64,
    pub backward_weight_s: f64,
}

impl LayerTiming {
    pub fn total_s(&self) -> f64 {
        self.forward_s + self.backward_data_s + self.backward_weight_s
    }
}

/// Per-conv-layer timing profile of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub layers: Vec<LayerTiming>,
}

impl TimingProfile {
    pub fn total_s(&self) -> f64 {
        self.layers.iter().map(|l| l.total_s()).sum()
    }

    /// Share of recorded time spent on backward-data: the `f` of the model.
    pub fn data_grad_fraction(&self) -> Result<f64> {
        let total = self.total_s();
        if self.layers.is_empty() || total <= 0.0 {
            return Err(Error::Input("profile has no recorded time".into()));
        }
        Ok(self.layers.iter().map(|l| l.backward_data_s).sum::<f64>() / total)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from(TIMING_CSV_HEADER);
        s.push('\n');
        for l in &self.layers {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                l.layer,
                l.forward_s * 1e3,
                l.backward_data_s * 1e3,
                l.backward_weight_s * 1e3
            ));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TimingProfile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let fmt_err = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        let mut layers = Vec::new();
        let mut offset = 0usize;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            let row = line.trim_end_matches('\n').trim_end_matches('\r');
            if i == 0 {
                if row != TIMING_CSV_HEADER {
                    return Err(fmt_err(0, format!("bad header {row:?}, expected {TIMING_CSV_HEADER:?}")));
                }
            } else if !row.is_empty() {
                let fields: Vec<&str> = row.split(',').collect();
                if fields.len() != 4 {
                    return Err(fmt_err(offset, format!("{} fields, expected 4", fields.len())));
                }
                let mut ms = [0.0f64; 3];
                for (slot, field) in ms.iter_mut().zip(&fields[1..]) {
                    *slot = field
                        .parse::<f64>()
                        .map_err(|e| fmt_err(offset, format!("bad timing {field:?}: {e}")))?;
                }
                layers.push(LayerTiming {
                    layer: fields[0].to_string(),
                    forward_s: ms[0] / 1e3,
                    backward_data_s: ms[1] / 1e3,
                    backward_weight_s: ms[2] / 1e3,
                });
            }
            offset += line.len();
        }
        Ok(TimingProfile { layers })
    }
}

pub const TIMING_CSV_HEADER: &str = "layer,fwd_ms,bwd_data_ms,bwd_weight_ms";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Profiles every conv layer of `net` (including convs inside residual
/// blocks) on a synthetic `[batch, h, w, c]` input drawn from `seed`. Each
/// phase (forward, backward-data, backward-weight) is run `repeats` times
/// (at least 3) and the median is recorded; backward passes are dense. The
/// network's caches are left as after one ordinary forward pass.
pub fn profile_network(
    net: &mut Network,
    input_dims: (usize, usize, usize),
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<TimingProfile> {
    if repeats < 3 {
        return Err(Error::Config(format!("repeats {repeats} < 3 gives no useful median")));
    }
    if batch == 0 {
        return Err(Error::Config("profile batch must be at least 1".into()));
    }
    let (h, w, c) = input_dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = random_tensor(&[batch, h, w, c], &mut rng)?;

    let mut timings = Vec::new();
    let mut conv_ordinal = 0usize;
    profile_chain(net.layers_mut(), &input, repeats, &mut rng, &mut conv_ordinal, &mut timings)?;

    for t in &timings {
        if t.forward_s <= 0.0 || t.backward_data_s <= 0.0 || t.backward_weight_s <= 0.0 {
            return Err(Error::Numeric(format!("layer {} recorded a non-positive time", t.layer)));
        }
    }
    Ok(TimingProfile { layers: timings })
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect(),
    )
}

fn profile_chain(
    layers: &mut [Layer],
    input: &Tensor,
    repeats: usize,
    rng: &mut ChaCha8Rng,
    conv_ordinal: &mut usize,
    timings: &mut Vec<LayerTiming>,
) -> Result<Tensor> {
    let mut cur = input.clone();
    for layer in layers {
        cur = match layer {
            Layer::Conv(conv) => {
                *conv_ordinal += 1;
                let name = format!("conv{conv_ordinal}");

                let mut fwd = Vec::with_capacity(repeats);
                let mut out = None;
                for _ in 0..repeats {
                    let t0 = Instant::now();
                    out = Some(conv.forward(&cur)?);
                    fwd.push(t0.elapsed().as_secs_f64());
                }
                let out = out.expect("repeats >= 3");

                let grad = random_tensor(out.shape(), rng)?;
                let mut bwd_w = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let t0 = Instant::now();
                    conv.backward_weight(&grad)?;
                    bwd_w.push(t0.elapsed().as_secs_f64());
                }
                let mut bwd_d = Vec::with_capacity(repeats);
                for _ in 0..repeats {
                    let t0 = Instant::now();
                    conv.backward_data(&grad, None)?;
                    bwd_d.push(t0.elapsed().as_secs_f64());
                }

                timings.push(LayerTiming {
                    layer: name,
                    forward_s: median(fwd),
                    backward_data_s: median(bwd_d),
                    backward_weight_s: median(bwd_w),
                });
                out
            }
            Layer::Residual(res) => {
                let body_out =
                    profile_chain(&mut res.body, &cur, repeats, rng, conv_ordinal, timings)?;
                add(&body_out, &cur)?
            }
            other => other.forward(&cur, Mode::Train)?,
        };
    }
    Ok(cur)
}

/// Analytic effect of an n:m pattern given the measured fraction `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupEstimate {
    /// Measured share of conv time spent on data gradients.
    pub data_grad_fraction: f64,
    /// `r = m / n`.
    pub sparsity_ratio: f64,
    /// Data-gradient share left after pruning: `f / r`.
    pub reduced_fraction: f64,
    /// Percent of total recorded time saved: `f * (1 - 1/r) * 100`.
    pub total_reduction_percent: f64,
}

fn check_pattern(n: usize, m: usize) -> Result<()> {
    if n < 1 || n > m || m > MAX_GROUP_SIZE {
        return Err(Error::Config(format!(
            "pattern {n}:{m} out of range (need 1 <= n <= m <= {MAX_GROUP_SIZE})"
        )));
    }
    Ok(())
}

fn check_fraction(f: f64) -> Result<()> {
    if !f.is_finite() || !(0.0..=1.0).contains(&f) {
        return Err(Error::Input(format!("fraction {f} outside [0, 1]")));
    }
    Ok(())
}

/// Speedup numbers for pruning data gradients to n:m given fraction `f` of
/// time spent on them. With `n == m` both reductions are zero.
pub fn estimate_speedup(data_grad_fraction: f64, n: usize, m: usize) -> Result<SpeedupEstimate> {
    check_fraction(data_grad_fraction)?;
    check_pattern(n, m)?;
    let keep = n as f64 / m as f64;
    Ok(SpeedupEstimate {
        data_grad_fraction,
        sparsity_ratio: 1.0 / keep,
        reduced_fraction: data_grad_fraction * keep,
        total_reduction_percent: data_grad_fraction * (1.0 - keep) * 100.0,
    })
}

/// Projected time for a pruned run to reach `target_top1`, from a dense
/// run's metric stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TtaEstimate {
    /// Cumulative projected seconds up to the first epoch whose validation
    /// accuracy meets the target.
    Reached { seconds: f64, epoch: usize },
    /// No epoch in the stream met the target.
    NotReached,
}

/// Estimates time-to-accuracy under pruning by scaling each epoch's recorded
/// wall time by the projected reduction (`1 - f * (1 - n/m)`) and summing
/// until the first epoch that meets `target_top1`. Assumes pruning does not
/// change the accuracy trajectory, so this is an optimistic projection.
pub fn estimate_tta(
    metrics: &[EpochMetric],
    target_top1: f64,
    data_grad_fraction: f64,
    n: usize,
    m: usize,
) -> Result<TtaEstimate> {
    if metrics.is_empty() {
        return Err(Error::Input("empty metric stream".into()));
    }
    if !target_top1.is_finite() {
        return Err(Error::Input(format!("target accuracy {target_top1} not finite")));
    }
    check_fraction(data_grad_fraction)?;
    check_pattern(n, m)?;
    let factor = 1.0 - data_grad_fraction * (1.0 - n as f64 / m as f64);
    let mut cum = 0.0f64;
    for row in metrics {
        cum += row.wall_s * factor;
        if row.val_top1 >= target_top1 {
            return Ok(TtaEstimate::Reached {
                seconds: cum,
                epoch: row.epoch,
            });
        }
    }
    Ok(TtaEstimate::NotReached)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speedup_arithmetic() {
        let e = estimate_speedup(0.3317, 2, 4).unwrap();
        assert!((e.total_reduction_percent - 16.6).abs() < 0.05);
        assert!((e.reduced_fraction - 0.3317 / 2.0).abs() < 1e-12);

        let e = estimate_speedup(0.3317, 1, 4).unwrap();
        assert!((e.total_reduction_percent - 24.9).abs() < 0.05);

        let e = estimate_speedup(0.3331, 4, 32).unwrap();
        assert!((e.reduced_fraction * 100.0 - 4.16).abs() < 0.01);

        let e = estimate_speedup(0.5, 4, 4).unwrap();
        assert_eq!(e.total_reduction_percent, 0.0);
        assert_eq!(e.reduced_fraction, 0.5);
    }

    #[test]
    fn speedup_rejects_bad_inputs() {
        assert!(estimate_speedup(-0.1, 2, 4).is_err());
        assert!(estimate_speedup(1.1, 2, 4).is_err());
        assert!(estimate_speedup(0.3, 0, 4).is_err());
        assert!(estimate_speedup(0.3, 5, 4).is_err());
        assert!(estimate_speedup(0.3, 2, 64).is_err());
    }

    #[test]
    fn tta_three_epoch_example() {
        let metrics: Vec<EpochMetric> = [(1, 60.0), (2, 80.0), (3, 92.0)]
            .iter()
            .map(|&(epoch, val_top1)| EpochMetric {
                epoch,
                wall_s: 100.0,
                train_loss: 1.0,
                val_top1,
            })
            .collect();
        match estimate_tta(&metrics, 75.0, 0.30, 1, 2).unwrap() {
            TtaEstimate::Reached { seconds, epoch } => {
                assert_eq!(seconds, 170.0);
                assert_eq!(epoch, 2);
            }
            TtaEstimate::NotReached => panic!("target should be reached"),
        }
        assert_eq!(
            estimate_tta(&metrics, 99.0, 0.30, 1, 2).unwrap(),
            TtaEstimate::NotReached
        );
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("timing.csv");
        let profile = TimingProfile {
            layers: vec![
                LayerTiming {
                    layer: "conv1".into(),
                    forward_s: 0.0123,
                    backward_data_s: 0.0074,
                    backward_weight_s: 0.0101,
                },
                LayerTiming {
                    layer: "conv2".into(),
                    forward_s: 0.0201,
                    backward_data_s: 0.0152,
                    backward_weight_s: 0.0188,
                },
            ],
        };
        profile.write_csv(&path).unwrap();
        let back = TimingProfile::read_csv(&path).unwrap();
        assert_eq!(back.layers.len(), 2);
        for (a, b) in back.layers.iter().zip(&profile.layers) {
            assert_eq!(a.layer, b.layer);
            assert!((a.forward_s - b.forward_s).abs() < 1e-9);
            assert!((a.backward_data_s - b.backward_data_s).abs() < 1e-9);
            assert!((a.backward_weight_s - b.backward_weight_s).abs() < 1e-9);
        }
        let f = back.data_grad_fraction().unwrap();
        let want = (0.0074 + 0.0152) / (0.0123 + 0.0074 + 0.0101 + 0.0201 + 0.0152 + 0.0188);
        assert!((f - want).abs() < 1e-6);
    }
}
