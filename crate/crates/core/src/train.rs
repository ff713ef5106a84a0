//! The training loop: SGD with momentum and weight decay, a single
//! triangular learning-rate cycle, per-epoch validation.
//!
//! All randomness (weight init, shuffling, random prune masks, synthetic
//! data) derives from the experiment seed, so a run is reproducible from its
//! config alone. Random pruning re-draws its masks every optimization step
//! by folding the step counter into the mask seed; magnitude-based pruning
//! depends only on gradient values. The reported training loss is the
//! smoothed cross-entropy only; weight decay acts in the optimizer and is
//! not part of the loss number. There is no early stopping: a run always
//! covers the configured epochs, one metric row per epoch.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{self, ExperimentConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::loss::{softmax_cross_entropy, softmax_cross_entropy_grad};
use crate::nn::{Mode, Network};
use crate::rng::{self, DOMAIN_INIT, DOMAIN_SHUFFLE};
use crate::tensor::Tensor;

/// One row of the per-epoch metric stream. `epoch` counts from 1; `wall_s`
/// is the epoch's wall-clock seconds (0.0 when wall-time recording is off);
/// `val_top1` is percent correct on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub wall_s: f64,
    pub train_loss: f64,
    pub val_top1: f64,
}

/// Mutable optimizer state threaded through a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub step: usize,
    /// Learning rate of the most recent step.
    pub lr: f32,
    /// Momentum buffers, aligned with [`Network::params`].
    pub velocity: Vec<Tensor>,
    pub history: Vec<EpochMetric>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub network: Network,
    pub state: TrainState,
}

/// Triangular learning rate over one cycle spanning the whole run: zero to
/// `peak` across the first 30% of steps, back to zero across the rest.
/// `cyclic_lr(0, ...)` is exactly zero.
pub fn cyclic_lr(step: usize, total_steps: usize, peak: f32) -> f32 {
    assert!(total_steps > 0, "a run has at least one step");
    let t = step as f64 / total_steps as f64;
    let up = 0.3;
    let f = if t < up { t / up } else { (1.0 - t) / (1.0 - up) };
    (peak as f64 * f.max(0.0)) as f32
}

/// One SGD step with classic momentum and decoupled-from-loss weight decay:
/// `v = momentum * v + g + weight_decay * w`, then `w -= lr * v`. Applies to
/// every trainable tensor, biases included. Errors if any parameter leaves
/// the finite range (the usual sign of a runaway learning rate).
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    velocity: &mut [Tensor],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Dimension(format!(
                "param {:?} vs grad {:?} vs velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv + weight_decay * *pv;
            *pv -= lr * *vv;
        }
    }
    for p in params.iter() {
        if p.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "parameters diverged to non-finite values; lower the learning rate".into(),
            ));
        }
    }
    Ok(())
}

/// Top-1 accuracy (percent) over `ds`, evaluated in eval mode in fixed
/// order. Argmax ties resolve to the lower class index.
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = ds.batch(chunk)?;
        let logits = net.forward(&x, Mode::Eval)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks_exact(classes).zip(&labels) {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == label as usize {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / ds.len() as f64)
}

/// Loads the config's datasets and trains on them.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train_ds, val_ds) = config::load_datasets(cfg)?;
    train_with_data(cfg, &train_ds, &val_ds)
}

/// Trains on the given splits. The model is initialized from the experiment
/// seed; epochs shuffle with seeds derived per epoch; conv data gradients
/// are pruned per the config's prune spec (dense when absent).
pub fn train_with_data(
    cfg: &ExperimentConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if val_ds.is_empty() {
        return Err(Error::Config("validation dataset is empty".into()));
    }
    let dims = train_ds.image_dims();
    if val_ds.image_dims() != dims || val_ds.num_classes() != train_ds.num_classes() {
        return Err(Error::Dimension(
            "train and validation sets disagree on image shape or class count".into(),
        ));
    }

    let opt = &cfg.optimizer;
    let mut net = config::build_network(
        &cfg.model,
        dims,
        train_ds.num_classes(),
        cfg.prune.as_ref().map(|p| p.m),
        rng::derive_seed(cfg.seed, DOMAIN_INIT),
    )?;
    let velocity = net
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.shape()))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState {
        epoch: 0,
        step: 0,
        lr: 0.0,
        velocity,
        history: Vec::with_capacity(opt.epochs),
    };

    let prune_base = cfg.prune_config();
    let shuffle_base = rng::derive_seed(cfg.seed, DOMAIN_SHUFFLE);
    let n = train_ds.len();
    let total_steps = opt.epochs * n.div_ceil(opt.batch_size);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..opt.epochs {
        let t0 = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(rng::mix(shuffle_base, epoch as u64));
        indices.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        for chunk in indices.chunks(opt.batch_size) {
            let (x, labels) = train_ds.batch(chunk)?;
            let logits = net.forward(&x, Mode::Train)?;
            let (loss, probs) = softmax_cross_entropy(&logits, &labels, opt.label_smoothing)?;
            loss_sum += loss * chunk.len() as f64;

            let dlogits = softmax_cross_entropy_grad(&probs, &labels, opt.label_smoothing)?;
            // Re-key random masks on the step counter; value-based pruning
            // ignores the seed.
            let step_prune =
                prune_base.map(|p| p.with_seed(rng::mix(p.seed, state.step as u64)));
            let grads = net.backward(&dlogits, step_prune.as_ref())?;

            let lr = cyclic_lr(state.step, total_steps, opt.lr);
            {
                let mut params = net.params_mut();
                let grad_refs = Network::param_grads(&grads);
                sgd_step(
                    &mut params,
                    &grad_refs,
                    &mut state.velocity,
                    lr,
                    opt.momentum,
                    opt.weight_decay,
                )?;
            }
            state.lr = lr;
            state.step += 1;
        }

        state.epoch = epoch + 1;
        let val_top1 = evaluate(&mut net, val_ds, opt.batch_size)?;
        let wall_s = if cfg.record_wall_time {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        state.history.push(EpochMetric {
            epoch: epoch + 1,
            wall_s,
            train_loss: loss_sum / n as f64,
            val_top1,
        });
    }

    Ok(TrainOutcome {
        network: net,
        state,
    })
}

pub const METRICS_CSV_HEADER: &str = "epoch,wall_s,train_loss,val_top1";

pub fn write_metrics_csv(metrics: &[EpochMetric], path: &Path) -> Result<()> {
    let mut s = String::with_capacity(64 * (metrics.len() + 1));
    s.push_str(METRICS_CSV_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.4}\n",
            m.epoch, m.wall_s, m.train_loss, m.val_top1
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn write_metrics_jsonl(metrics: &[EpochMetric], path: &Path) -> Result<()> {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Parses a metrics CSV written by [`write_metrics_csv`]. Errors carry the
/// byte offset of the offending line.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetric>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let fmt_err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };

    let mut metrics = Vec::new();
    let mut offset = 0usize;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let row = line.trim_end_matches('\n').trim_end_matches('\r');
        if i == 0 {
            if row != METRICS_CSV_HEADER {
                return Err(fmt_err(0, format!("bad header {row:?}, expected {METRICS_CSV_HEADER:?}")));
            }
        } else if !row.is_empty() {
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != 4 {
                return Err(fmt_err(offset, format!("{} fields, expected 4", fields.len())));
            }
            let epoch = fields[0]
                .parse::<usize>()
                .map_err(|e| fmt_err(offset, format!("bad epoch {:?}: {e}", fields[0])))?;
            let mut nums = [0.0f64; 3];
            for (slot, (name, field)) in nums.iter_mut().zip(
                [("wall_s", fields[1]), ("train_loss", fields[2]), ("val_top1", fields[3])],
            ) {
                *slot = field
                    .parse::<f64>()
                    .map_err(|e| fmt_err(offset, format!("bad {name} {field:?}: {e}")))?;
            }
            metrics.push(EpochMetric {
                epoch,
                wall_s: nums[0],
                train_loss: nums[1],
                val_top1: nums[2],
            });
        }
        offset += line.len();
    }
    Ok(metrics)
}
