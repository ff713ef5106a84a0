//! Experiment configuration: JSON-serializable specs for the dataset, model,
//! optimizer, and pruning scheme, plus the builders that turn them into live
//! objects. Validation walks the model layer by layer and names the exact
//! layer (`model.layers[i]`, nested as `...body[j]`) in every complaint, so
//! a bad config fails before any training work starts.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SynthSpec, SynthTask};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d, Network, Relu, Residual};
use crate::prune::{PruneConfig, PruneFunction, RescaleScope};
use crate::rng::{self, DOMAIN_PRUNE, DOMAIN_SYNTH};
use crate::tensor::{ConvShape, Tensor};

/// Everything one experiment needs, reproducible from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub optimizer: OptimizerSpec,
    /// Pruning scheme for conv data gradients; absent means dense training.
    #[serde(default)]
    pub prune: Option<PruneSpec>,
    /// Where artifacts go; the CLI may override.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Master seed; all per-component randomness derives from it.
    #[serde(default)]
    pub seed: u64,
    /// When false, metric rows record 0.0 wall seconds. Turn off to make
    /// run artifacts byte-for-byte reproducible.
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Self-contained Gaussian-bump classification task; see [`SynthTask`]
    /// for the two families.
    Synthetic {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_val_samples")]
        val_samples: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default = "default_channels")]
        channels: usize,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default = "default_jitter")]
        jitter: f32,
        #[serde(default)]
        task: SynthTask,
    },
    /// IDX image/label pairs in the standard file layout
    /// (`train-images-idx3-ubyte` etc.) under `dir`.
    Mnist {
        dir: PathBuf,
        /// Optional per-class subsample of the training split.
        #[serde(default)]
        train_per_class: Option<usize>,
        /// Optional per-class subsample of the validation split.
        #[serde(default)]
        val_per_class: Option<usize>,
    },
    /// CIFAR-10 binary batches under `dir`.
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        train_per_class: Option<usize>,
        #[serde(default)]
        val_per_class: Option<usize>,
    },
}

fn default_samples() -> usize {
    1600
}
fn default_val_samples() -> usize {
    400
}
fn default_classes() -> usize {
    4
}
fn default_side() -> usize {
    16
}
fn default_channels() -> usize {
    1
}
fn default_noise() -> f32 {
    0.25
}
fn default_jitter() -> f32 {
    0.8
}

impl DatasetSpec {
    /// `(height, width, channels)` of one image, known without loading.
    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self {
            DatasetSpec::Synthetic {
                height,
                width,
                channels,
                ..
            } => (*height, *width, *channels),
            DatasetSpec::Mnist { .. } => (28, 28, 1),
            DatasetSpec::Cifar10 { .. } => (32, 32, 3),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Mnist { .. } | DatasetSpec::Cifar10 { .. } => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        /// Defaults to `size` (non-overlapping windows).
        #[serde(default)]
        stride: Option<usize>,
    },
    BatchNorm,
    Linear {
        out_features: usize,
    },
    Residual {
        body: Vec<LayerSpec>,
    },
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    /// Peak learning rate of the cyclic schedule.
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_label_smoothing")]
    pub label_smoothing: f32,
}

fn default_momentum() -> f32 {
    0.9
}
fn default_weight_decay() -> f32 {
    5e-4
}
fn default_batch_size() -> usize {
    64
}
fn default_label_smoothing() -> f32 {
    0.1
}

impl OptimizerSpec {
    fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("optimizer.lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "optimizer.momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "optimizer.weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("optimizer.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "optimizer.label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

/// Pruning scheme as written in configs. `seed` offsets the mask stream of
/// random pruning; the effective seed also folds in the experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub function: PruneFunction,
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rescale: RescaleScope,
}

impl PruneSpec {
    pub fn to_config(&self, experiment_seed: u64) -> PruneConfig {
        PruneConfig {
            function: self.function,
            n: self.n,
            m: self.m,
            seed: rng::mix(rng::derive_seed(experiment_seed, DOMAIN_PRUNE), self.seed),
            rescale: self.rescale,
        }
    }

    fn validate(&self) -> Result<()> {
        PruneConfig {
            function: self.function,
            n: self.n,
            m: self.m,
            seed: 0,
            rescale: self.rescale,
        }
        .validate()
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Pretty JSON snapshot that parses back to an equal config.
    pub fn to_snapshot_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Full static validation: optimizer ranges, dataset shape, prune
    /// bounds, and a dry model build that checks the layer-by-layer shape
    /// flow (including channel divisibility by the prune group size).
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if let Some(prune) = &self.prune {
            prune.validate()?;
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                samples,
                val_samples,
                ..
            } => {
                if *samples == 0 || *val_samples == 0 {
                    return Err(Error::Config(
                        "dataset.samples and dataset.val_samples must be positive".into(),
                    ));
                }
                self.synth_spec(*samples)?.validate()?;
            }
            DatasetSpec::Mnist { .. } | DatasetSpec::Cifar10 { .. } => {}
        }
        build_network(
            &self.model,
            self.dataset.input_dims(),
            self.dataset.num_classes(),
            self.prune.as_ref().map(|p| p.m),
            0,
        )?;
        Ok(())
    }

    /// Effective prune configuration, or `None` for dense training.
    pub fn prune_config(&self) -> Option<PruneConfig> {
        self.prune.as_ref().map(|p| p.to_config(self.seed))
    }

    fn synth_spec(&self, samples: usize) -> Result<SynthSpec> {
        let DatasetSpec::Synthetic {
            classes,
            height,
            width,
            channels,
            noise,
            jitter,
            task,
            ..
        } = &self.dataset
        else {
            return Err(Error::State("not a synthetic dataset".into()));
        };
        Ok(SynthSpec {
            samples,
            classes: *classes,
            height: *height,
            width: *width,
            channels: *channels,
            noise: *noise,
            jitter: *jitter,
            task: *task,
        })
    }
}

/// Loads (train, validation) splits per the dataset spec. Synthetic splits
/// are generated from seeds derived from the experiment seed, so the whole
/// experiment reproduces from one number.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            samples,
            val_samples,
            ..
        } => {
            let base = rng::derive_seed(cfg.seed, DOMAIN_SYNTH);
            let train = data::synth_dataset_with(&cfg.synth_spec(*samples)?, rng::mix(base, 0))?;
            let val = data::synth_dataset_with(&cfg.synth_spec(*val_samples)?, rng::mix(base, 1))?;
            Ok((train, val))
        }
        DatasetSpec::Mnist {
            dir,
            train_per_class,
            val_per_class,
        } => {
            let mut train = data::load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let mut val = data::load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            if let Some(n) = train_per_class {
                train = train.take_per_class(*n)?;
            }
            if let Some(n) = val_per_class {
                val = val.take_per_class(*n)?;
            }
            Ok((train, val))
        }
        DatasetSpec::Cifar10 {
            dir,
            train_per_class,
            val_per_class,
        } => {
            let mut train = data::load_cifar10_train(dir)?;
            let mut val = data::load_cifar10_test(dir)?;
            if let Some(n) = train_per_class {
                train = train.take_per_class(*n)?;
            }
            if let Some(n) = val_per_class {
                val = val.take_per_class(*n)?;
            }
            Ok((train, val))
        }
    }
}

enum Feat {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Feat {
    fn describe(&self) -> String {
        match self {
            Feat::Spatial(h, w, c) => format!("{h}x{w}x{c} feature map"),
            Feat::Flat(f) => format!("{f} flat features"),
        }
    }
}

/// Builds an initialized network from a model spec.
///
/// Conv weights use He-uniform initialization (fan-in of the lowered weight
/// matrix), linear weights Xavier-uniform, biases zero; draws come from a
/// ChaCha stream over `init_seed` in layer order, so the same seed always
/// yields the same parameters. `prune_m` adds the divisibility check for
/// each conv's output channels without affecting initialization.
pub fn build_network(
    model: &ModelSpec,
    input_dims: (usize, usize, usize),
    num_classes: usize,
    prune_m: Option<usize>,
    init_seed: u64,
) -> Result<Network> {
    if model.layers.is_empty() {
        return Err(Error::Config("model.layers must not be empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let (h, w, c) = input_dims;
    let mut feat = Feat::Spatial(h, w, c);
    let layers = build_chain(&model.layers, &mut feat, prune_m, &mut rng, "model.layers")?;
    match feat {
        Feat::Flat(f) if f == num_classes => Ok(Network::new(layers)),
        other => Err(Error::Config(format!(
            "model must end with {num_classes} flat outputs (one per class), ends with {}",
            other.describe()
        ))),
    }
}

fn build_chain(
    specs: &[LayerSpec],
    feat: &mut Feat,
    prune_m: Option<usize>,
    rng: &mut ChaCha8Rng,
    path: &str,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let at = format!("{path}[{i}]");
        layers.push(build_layer(spec, feat, prune_m, rng, &at)?);
    }
    Ok(layers)
}

fn build_layer(
    spec: &LayerSpec,
    feat: &mut Feat,
    prune_m: Option<usize>,
    rng: &mut ChaCha8Rng,
    at: &str,
) -> Result<Layer> {
    match spec {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let Feat::Spatial(h, w, c) = *feat else {
                return Err(Error::Config(format!(
                    "{at}: conv needs a spatial input, got {}",
                    feat.describe()
                )));
            };
            let conv = ConvShape {
                batch: 1,
                in_channels: c,
                height: h,
                width: w,
                out_channels: *out_channels,
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            };
            conv.validate()
                .map_err(|e| Error::Config(format!("{at}: {e}")))?;
            if let Some(m) = prune_m {
                if *out_channels % m != 0 {
                    return Err(Error::Config(format!(
                        "{at}: conv out_channels {out_channels} not divisible by prune group size m={m}"
                    )));
                }
            }
            let fan_in = kernel * kernel * c;
            let weight = uniform_tensor(&[fan_in, *out_channels], (6.0 / fan_in as f64).sqrt(), rng)?;
            let bias = Tensor::zeros(&[*out_channels])?;
            *feat = Feat::Spatial(conv.out_height(), conv.out_width(), *out_channels);
            Ok(Layer::Conv(Conv2d::new(
                c,
                *out_channels,
                *kernel,
                *stride,
                *padding,
                weight,
                bias,
            )?))
        }
        LayerSpec::Relu => Ok(Layer::Relu(Relu::new())),
        LayerSpec::MaxPool { size, stride } => {
            let Feat::Spatial(h, w, c) = *feat else {
                return Err(Error::Config(format!(
                    "{at}: maxpool needs a spatial input, got {}",
                    feat.describe()
                )));
            };
            let stride = stride.unwrap_or(*size);
            if *size == 0 || stride == 0 || h < *size || w < *size {
                return Err(Error::Config(format!(
                    "{at}: maxpool window {size} (stride {stride}) does not fit {h}x{w}"
                )));
            }
            *feat = Feat::Spatial((h - size) / stride + 1, (w - size) / stride + 1, c);
            Ok(Layer::MaxPool(MaxPool2d::new(*size, stride)?))
        }
        LayerSpec::BatchNorm => {
            let channels = match *feat {
                Feat::Spatial(_, _, c) => c,
                Feat::Flat(f) => f,
            };
            Ok(Layer::BatchNorm(BatchNorm::new(channels)?))
        }
        LayerSpec::Linear { out_features } => {
            let in_features = match *feat {
                Feat::Spatial(h, w, c) => h * w * c,
                Feat::Flat(f) => f,
            };
            if *out_features == 0 {
                return Err(Error::Config(format!("{at}: linear out_features must be positive")));
            }
            let limit = (6.0 / (in_features + out_features) as f64).sqrt();
            let weight = uniform_tensor(&[in_features, *out_features], limit, rng)?;
            let bias = Tensor::zeros(&[*out_features])?;
            *feat = Feat::Flat(*out_features);
            Ok(Layer::Linear(Linear::new(in_features, *out_features, weight, bias)?))
        }
        LayerSpec::Residual { body } => {
            if body.is_empty() {
                return Err(Error::Config(format!("{at}: residual body must not be empty")));
            }
            let entry = feat.describe();
            let inner = build_chain(body, feat, prune_m, rng, &format!("{at}.body"))?;
            if feat.describe() != entry {
                return Err(Error::Config(format!(
                    "{at}: residual body maps {entry} to {}; the skip add needs matching shapes",
                    feat.describe()
                )));
            }
            Ok(Layer::Residual(Residual::new(inner)?))
        }
    }
}

fn uniform_tensor(shape: &[usize], limit: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Four conv stages and a classifier head: the default desk-scale model.
pub fn tinynet_layers(num_classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
        Relu,
        MaxPool { size: 2, stride: None },
        Conv { out_channels: 64, kernel: 3, stride: 1, padding: 1 },
        Relu,
        MaxPool { size: 2, stride: None },
        Conv { out_channels: 64, kernel: 3, stride: 1, padding: 1 },
        Relu,
        MaxPool { size: 2, stride: None },
        Conv { out_channels: 64, kernel: 3, stride: 1, padding: 1 },
        Relu,
        Linear { out_features: num_classes },
    ]
}

/// Deeper variant with batchnorm and skip connections.
pub fn resnet9ish_layers(num_classes: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    let block = |ch: usize| -> Vec<LayerSpec> {
        vec![
            Conv { out_channels: ch, kernel: 3, stride: 1, padding: 1 },
            BatchNorm,
            Relu,
            Conv { out_channels: ch, kernel: 3, stride: 1, padding: 1 },
            BatchNorm,
            Relu,
        ]
    };
    vec![
        Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
        BatchNorm,
        Relu,
        Conv { out_channels: 64, kernel: 3, stride: 1, padding: 1 },
        BatchNorm,
        Relu,
        MaxPool { size: 2, stride: None },
        Residual { body: block(64) },
        Conv { out_channels: 64, kernel: 3, stride: 1, padding: 1 },
        BatchNorm,
        Relu,
        MaxPool { size: 2, stride: None },
        Residual { body: block(64) },
        MaxPool { size: 2, stride: None },
        Linear { out_features: num_classes },
    ]
}
