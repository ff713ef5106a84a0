//! Layers and reverse-mode gradients.
//!
//! A [`Network`] is a flat list of layers applied in order. `forward` caches
//! whatever each layer needs for its gradient; `backward` walks the layers in
//! reverse and returns one [`LayerGrads`] per layer.
//!
//! Convolution is where gradient pruning hooks in. A conv layer's backward
//! pass computes two things from the gradient at its output: the weight
//! gradient, always from the dense signal, and the data gradient sent to the
//! layer below, from an n-of-m pruned copy when a [`PruneConfig`] is given.
//! The pruned axis is the conv's output-channel axis. Only conv layers
//! prune; everything else backpropagates exactly. The first layer of a
//! network never receives a prune config, because its data gradient falls
//! off the bottom of the chain anyway.

pub mod checkpoint;
pub mod loss;

use crate::error::{Error, Result};
use crate::prune::{PruneConfig, sdgp};
use crate::tensor::{ConvShape, Tensor, col2im, im2col, matmul, matmul_ta, matmul_tb};

/// Whether a forward pass is part of training (uses batch statistics and
/// fills gradient caches) or evaluation (uses running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients produced by one layer's backward step.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    /// The (dense) gradient at the layer's output, as received.
    pub output_grad: Tensor,
    /// Gradient at the layer's input, shaped like that input.
    pub data_grad: Tensor,
    /// One gradient per trainable parameter tensor, aligned with
    /// [`Layer::params`].
    pub weight_grads: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Linear(Linear),
    Relu(Relu),
    MaxPool(MaxPool2d),
    BatchNorm(BatchNorm),
    Residual(Residual),
}

impl Layer {
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => l.forward(input),
            Layer::Linear(l) => l.forward(input),
            Layer::Relu(l) => l.forward(input),
            Layer::MaxPool(l) => l.forward(input),
            Layer::BatchNorm(l) => l.forward(input, mode),
            Layer::Residual(l) => l.forward(input, mode),
        }
    }

    /// Backward step. `prune` is honored by conv layers (and forwarded into
    /// residual bodies); other layers ignore it.
    pub fn backward(&self, output_grad: &Tensor, prune: Option<&PruneConfig>) -> Result<LayerGrads> {
        match self {
            Layer::Conv(l) => l.backward(output_grad, prune),
            Layer::Linear(l) => l.backward(output_grad),
            Layer::Relu(l) => l.backward(output_grad),
            Layer::MaxPool(l) => l.backward(output_grad),
            Layer::BatchNorm(l) => l.backward(output_grad),
            Layer::Residual(l) => l.backward(output_grad, prune),
        }
    }

    /// Trainable parameter tensors, in a fixed per-layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Relu(_) | Layer::MaxPool(_) => vec![],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Residual(l) => l.body.iter().flat_map(|b| b.params()).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu(_) | Layer::MaxPool(_) => vec![],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Residual(l) => l.body.iter_mut().flat_map(|b| b.params_mut()).collect(),
        }
    }

    /// Persistent tensors for checkpointing: the trainable parameters plus
    /// non-trained state (batchnorm running statistics).
    pub fn state_tensors(&self) -> Vec<&Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            Layer::Residual(l) => l.body.iter().flat_map(|b| b.state_tensors()).collect(),
            other => other.params(),
        }
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            Layer::Residual(l) => l.body.iter_mut().flat_map(|b| b.state_tensors_mut()).collect(),
            other => other.params_mut(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Linear(_) => "linear",
            Layer::Relu(_) => "relu",
            Layer::MaxPool(_) => "maxpool",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Residual(_) => "residual",
        }
    }
}

/// 2D convolution, channels last, square kernel, symmetric zero padding.
/// Lowered to `im2col(input) * weight`; the weight matrix is stored in its
/// lowered `[kernel*kernel*in_channels, out_channels]` form.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    weight: Tensor,
    bias: Tensor,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    conv: ConvShape,
    cols: Tensor,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        let wshape = [kernel * kernel * in_channels, out_channels];
        if weight.shape() != wshape {
            return Err(Error::Dimension(format!(
                "conv weight shape {:?}, expected {wshape:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [out_channels] {
            return Err(Error::Dimension(format!(
                "conv bias shape {:?}, expected [{out_channels}]",
                bias.shape()
            )));
        }
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
            cache: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    fn shape_for(&self, input: &Tensor) -> Result<ConvShape> {
        let &[batch, height, width, channels] = input.shape() else {
            return Err(Error::Dimension(format!(
                "conv input must be [batch, height, width, channels], got {:?}",
                input.shape()
            )));
        };
        if channels != self.in_channels {
            return Err(Error::Dimension(format!(
                "conv expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        let conv = ConvShape {
            batch,
            in_channels: channels,
            height,
            width,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        };
        conv.validate()?;
        Ok(conv)
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let conv = self.shape_for(input)?;
        let cols = im2col(input, &conv)?;
        let out = matmul(&cols, &self.weight)?;
        let (_, mut data) = out.into_parts();
        for row in data.chunks_exact_mut(self.out_channels) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        self.cache = Some(ConvCache { conv, cols });
        Tensor::new(conv.output_dims().to_vec(), data)
    }

    fn cache(&self) -> Result<&ConvCache> {
        self.cache
            .as_ref()
            .ok_or_else(|| Error::State("conv backward before forward".into()))
    }

    fn grad_as_matrix(&self, output_grad: &Tensor) -> Result<(Tensor, ConvShape)> {
        let cache = self.cache()?;
        if output_grad.shape() != cache.conv.output_dims() {
            return Err(Error::Dimension(format!(
                "conv output grad shape {:?}, expected {:?}",
                output_grad.shape(),
                cache.conv.output_dims()
            )));
        }
        let rows = cache.conv.col_dims()[0];
        Ok((
            output_grad.reshape(&[rows, self.out_channels])?,
            cache.conv,
        ))
    }

    /// Weight and bias gradients, always from the dense output gradient.
    pub fn backward_weight(&self, output_grad: &Tensor) -> Result<(Tensor, Tensor)> {
        let (og, _) = self.grad_as_matrix(output_grad)?;
        let cache = self.cache()?;
        let dw = matmul_ta(&cache.cols, &og)?;
        let mut db = vec![0.0f64; self.out_channels];
        for row in og.data().chunks_exact(self.out_channels) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g as f64;
            }
        }
        let db = Tensor::new(
            vec![self.out_channels],
            db.into_iter().map(|v| v as f32).collect(),
        )?;
        Ok((dw, db))
    }

    /// Gradient at the conv's input. When `prune` is given, the output
    /// gradient is first pruned to n-of-m sparsity along the output-channel
    /// axis; the caller's tensor is never modified.
    pub fn backward_data(&self, output_grad: &Tensor, prune: Option<&PruneConfig>) -> Result<Tensor> {
        let (og, conv) = self.grad_as_matrix(output_grad)?;
        let pruned;
        let src = match prune {
            Some(cfg) => {
                pruned = sdgp(&og, cfg)?;
                &pruned
            }
            None => &og,
        };
        let dcols = matmul_tb(src, &self.weight)?;
        col2im(&dcols, &conv)
    }

    pub fn backward(&self, output_grad: &Tensor, prune: Option<&PruneConfig>) -> Result<LayerGrads> {
        let (dw, db) = self.backward_weight(output_grad)?;
        let dx = self.backward_data(output_grad, prune)?;
        Ok(LayerGrads {
            output_grad: output_grad.clone(),
            data_grad: dx,
            weight_grads: vec![dw, db],
        })
    }
}

/// Fully connected layer. Inputs of higher rank are flattened to
/// `[batch, features]` and the data gradient is restored to the input shape.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: Tensor,
    bias: Tensor,
    cache: Option<LinearCache>,
}

#[derive(Debug, Clone)]
struct LinearCache {
    input2d: Tensor,
    input_shape: Vec<usize>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape() != [in_features, out_features] {
            return Err(Error::Dimension(format!(
                "linear weight shape {:?}, expected {:?}",
                weight.shape(),
                [in_features, out_features]
            )));
        }
        if bias.shape() != [out_features] {
            return Err(Error::Dimension(format!(
                "linear bias shape {:?}, expected [{out_features}]",
                bias.shape()
            )));
        }
        Ok(Linear {
            in_features,
            out_features,
            weight,
            bias,
            cache: None,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let batch = input.shape()[0];
        let features = input.len() / batch;
        if features != self.in_features {
            return Err(Error::Dimension(format!(
                "linear expects {} features, input {:?} flattens to {features}",
                self.in_features,
                input.shape()
            )));
        }
        let input2d = input.reshape(&[batch, features])?;
        let out = matmul(&input2d, &self.weight)?;
        let (_, mut data) = out.into_parts();
        for row in data.chunks_exact_mut(self.out_features) {
            for (v, &b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        self.cache = Some(LinearCache {
            input2d,
            input_shape: input.shape().to_vec(),
        });
        Tensor::new(vec![batch, self.out_features], data)
    }

    pub fn backward(&self, output_grad: &Tensor) -> Result<LayerGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("linear backward before forward".into()))?;
        let batch = cache.input2d.shape()[0];
        if output_grad.shape() != [batch, self.out_features] {
            return Err(Error::Dimension(format!(
                "linear output grad shape {:?}, expected {:?}",
                output_grad.shape(),
                [batch, self.out_features]
            )));
        }
        let dw = matmul_ta(&cache.input2d, output_grad)?;
        let mut db = vec![0.0f64; self.out_features];
        for row in output_grad.data().chunks_exact(self.out_features) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc += g as f64;
            }
        }
        let db = Tensor::new(
            vec![self.out_features],
            db.into_iter().map(|v| v as f32).collect(),
        )?;
        let dx = matmul_tb(output_grad, &self.weight)?;
        Ok(LayerGrads {
            output_grad: output_grad.clone(),
            data_grad: dx.into_reshaped(&cache.input_shape)?,
            weight_grads: vec![dw, db],
        })
    }
}

/// Elementwise `max(0, x)`. The gradient at zero is zero.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let out = Tensor::new(
            input.shape().to_vec(),
            input.data().iter().map(|&v| v.max(0.0)).collect(),
        )?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    pub fn backward(&self, output_grad: &Tensor) -> Result<LayerGrads> {
        let input = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("relu backward before forward".into()))?;
        if output_grad.shape() != input.shape() {
            return Err(Error::Dimension(format!(
                "relu output grad shape {:?}, expected {:?}",
                output_grad.shape(),
                input.shape()
            )));
        }
        let data = input
            .data()
            .iter()
            .zip(output_grad.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(LayerGrads {
            output_grad: output_grad.clone(),
            data_grad: Tensor::new(input.shape().to_vec(), data)?,
            weight_grads: vec![],
        })
    }
}

/// Square max pooling over `[batch, height, width, channels]`, no padding.
/// Ties keep the first maximum in scan order (window rows, then columns).
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    /// Flat input index of each output element's source.
    argmax: Vec<u32>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::Config("maxpool size and stride must be positive".into()));
        }
        Ok(MaxPool2d {
            size,
            stride,
            cache: None,
        })
    }

    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let &[batch, height, width, channels] = input.shape() else {
            return Err(Error::Dimension(format!(
                "maxpool input must be [batch, height, width, channels], got {:?}",
                input.shape()
            )));
        };
        if height < self.size || width < self.size {
            return Err(Error::Dimension(format!(
                "maxpool window {} does not fit into {height}x{width} input",
                self.size
            )));
        }
        assert!(input.len() <= u32::MAX as usize, "input too large for pool bookkeeping");
        let oh = (height - self.size) / self.stride + 1;
        let ow = (width - self.size) / self.stride + 1;
        let src = input.data();
        let mut out = vec![0.0f32; batch * oh * ow * channels];
        let mut argmax = vec![0u32; out.len()];
        let mut o = 0;
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let best = &mut out[o..o + channels];
                    let best_idx = &mut argmax[o..o + channels];
                    for wy in 0..self.size {
                        let iy = oy * self.stride + wy;
                        for wx in 0..self.size {
                            let ix = ox * self.stride + wx;
                            let base = (((b * height) + iy) * width + ix) * channels;
                            let first = wy == 0 && wx == 0;
                            for c in 0..channels {
                                let v = src[base + c];
                                if first || v > best[c] {
                                    best[c] = v;
                                    best_idx[c] = (base + c) as u32;
                                }
                            }
                        }
                    }
                    o += channels;
                }
            }
        }
        let output_shape = vec![batch, oh, ow, channels];
        self.cache = Some(PoolCache {
            input_shape: input.shape().to_vec(),
            output_shape: output_shape.clone(),
            argmax,
        });
        Tensor::new(output_shape, out)
    }

    pub fn backward(&self, output_grad: &Tensor) -> Result<LayerGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("maxpool backward before forward".into()))?;
        if output_grad.shape() != cache.output_shape {
            return Err(Error::Dimension(format!(
                "maxpool output grad shape {:?}, expected {:?}",
                output_grad.shape(),
                cache.output_shape
            )));
        }
        let mut dx = vec![0.0f32; cache.input_shape.iter().product()];
        for (&src_idx, &g) in cache.argmax.iter().zip(output_grad.data()) {
            dx[src_idx as usize] += g;
        }
        Ok(LayerGrads {
            output_grad: output_grad.clone(),
            data_grad: Tensor::new(cache.input_shape.clone(), dx)?,
            weight_grads: vec![],
        })
    }
}

/// Batch normalization over the channel (trailing) axis; all leading axes
/// are reduced. In training mode it normalizes with batch statistics and
/// updates running statistics as `running = momentum * running + (1 -
/// momentum) * batch`; in eval mode it applies the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("batchnorm needs at least one channel".into()));
        }
        Ok(BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.9,
            gamma: Tensor::filled(&[channels], 1.0)?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::filled(&[channels], 1.0)?,
            cache: None,
        })
    }

    fn check_input(&self, input: &Tensor) -> Result<usize> {
        if input.shape().len() < 2 || input.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels,
                input.shape()
            )));
        }
        Ok(input.len() / self.channels)
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let rows = self.check_input(input)?;
        let c = self.channels;
        let src = input.data();
        match mode {
            Mode::Train => {
                let mut mean = vec![0.0f64; c];
                for row in src.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v as f64;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0f64; c];
                for row in src.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v as f64 - m;
                        *s += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();

                let mut xhat = vec![0.0f32; src.len()];
                let mut out = vec![0.0f32; src.len()];
                let gamma = self.gamma.data();
                let beta = self.beta.data();
                for (i, &v) in src.iter().enumerate() {
                    let ch = i % c;
                    let h = (v as f64 - mean[ch]) * inv_std[ch];
                    xhat[i] = h as f32;
                    out[i] = (gamma[ch] as f64 * h + beta[ch] as f64) as f32;
                }

                // Running variance uses the unbiased estimate when possible.
                let bessel = if rows > 1 {
                    rows as f64 / (rows - 1) as f64
                } else {
                    1.0
                };
                let mom = self.momentum;
                for ((rm, rv), (&m, &v)) in self
                    .running_mean
                    .data_mut()
                    .iter_mut()
                    .zip(self.running_var.data_mut())
                    .zip(mean.iter().zip(&var))
                {
                    *rm = (mom * *rm as f64 + (1.0 - mom) * m) as f32;
                    *rv = (mom * *rv as f64 + (1.0 - mom) * v * bessel) as f32;
                }

                self.cache = Some(BnCache {
                    xhat,
                    inv_std,
                    shape: input.shape().to_vec(),
                });
                Tensor::new(input.shape().to_vec(), out)
            }
            Mode::Eval => {
                let gamma = self.gamma.data();
                let beta = self.beta.data();
                let rm = self.running_mean.data();
                let rv = self.running_var.data();
                let scale: Vec<f64> = (0..c)
                    .map(|ch| gamma[ch] as f64 / (rv[ch] as f64 + self.eps).sqrt())
                    .collect();
                let out = src
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = i % c;
                        ((v as f64 - rm[ch] as f64) * scale[ch] + beta[ch] as f64) as f32
                    })
                    .collect();
                Tensor::new(input.shape().to_vec(), out)
            }
        }
    }

    pub fn backward(&self, output_grad: &Tensor) -> Result<LayerGrads> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("batchnorm backward requires a training-mode forward".into()))?;
        if output_grad.shape() != cache.shape {
            return Err(Error::Dimension(format!(
                "batchnorm output grad shape {:?}, expected {:?}",
                output_grad.shape(),
                cache.shape
            )));
        }
        let c = self.channels;
        let rows = (output_grad.len() / c) as f64;
        let dy = output_grad.data();

        let mut dbeta = vec![0.0f64; c];
        let mut dgamma = vec![0.0f64; c];
        for (i, &g) in dy.iter().enumerate() {
            let ch = i % c;
            dbeta[ch] += g as f64;
            dgamma[ch] += g as f64 * cache.xhat[i] as f64;
        }

        let gamma = self.gamma.data();
        let dx = dy
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let ch = i % c;
                let centered = g as f64 - dbeta[ch] / rows - cache.xhat[i] as f64 * dgamma[ch] / rows;
                (gamma[ch] as f64 * cache.inv_std[ch] * centered) as f32
            })
            .collect();

        Ok(LayerGrads {
            output_grad: output_grad.clone(),
            data_grad: Tensor::new(cache.shape.clone(), dx)?,
            weight_grads: vec![
                Tensor::new(vec![c], dgamma.into_iter().map(|v| v as f32).collect())?,
                Tensor::new(vec![c], dbeta.into_iter().map(|v| v as f32).collect())?,
            ],
        })
    }
}

/// Identity skip connection around a sequential body: `y = body(x) + x`.
/// The body must preserve the input shape.
#[derive(Debug, Clone)]
pub struct Residual {
    pub body: Vec<Layer>,
}

impl Residual {
    pub fn new(body: Vec<Layer>) -> Result<Self> {
        if body.is_empty() {
            return Err(Error::Config("residual body must not be empty".into()));
        }
        Ok(Residual { body })
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = input.clone();
        for layer in &mut self.body {
            cur = layer.forward(&cur, mode)?;
        }
        if cur.shape() != input.shape() {
            return Err(Error::Dimension(format!(
                "residual body maps {:?} to {:?}; shapes must match for the skip add",
                input.shape(),
                cur.shape()
            )));
        }
        add(&cur, input)
    }

    pub fn backward(&self, output_grad: &Tensor, prune: Option<&PruneConfig>) -> Result<LayerGrads> {
        // Every conv in the body prunes: the skip-first rule applies only to
        // the first layer of the whole network.
        let body_grads = backward_chain(&self.body, output_grad, prune, true)?;
        let body_input_grad = &body_grads[0].data_grad;
        let data_grad = add(body_input_grad, output_grad)?;
        let weight_grads = body_grads.into_iter().flat_map(|g| g.weight_grads).collect();
        Ok(LayerGrads {
            output_grad: output_grad.clone(),
            data_grad,
            weight_grads,
        })
    }
}

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "elementwise add of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

/// Runs the layers of a chain backward. `grads[i]` belongs to `layers[i]`;
/// each layer consumes the data gradient of the layer above. When
/// `prune_first` is false the chain's first layer gets no prune config (its
/// data gradient is never consumed).
fn backward_chain(
    layers: &[Layer],
    top_grad: &Tensor,
    prune: Option<&PruneConfig>,
    prune_first: bool,
) -> Result<Vec<LayerGrads>> {
    let mut rev: Vec<LayerGrads> = Vec::with_capacity(layers.len());
    let mut grad = top_grad.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        let cfg = if i == 0 && !prune_first { None } else { prune };
        let lg = layer.backward(&grad, cfg)?;
        grad = lg.data_grad.clone();
        rev.push(lg);
    }
    rev.reverse();
    Ok(rev)
}

/// A sequential stack of layers.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = input.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Reverse-mode sweep from the loss gradient. Returns one [`LayerGrads`]
    /// per layer, in layer order; `grads[i].data_grad` is the gradient at
    /// layer i's input. Conv layers prune their data gradients per `prune`,
    /// except the first layer of the network, which always runs dense.
    pub fn backward(&self, loss_grad: &Tensor, prune: Option<&PruneConfig>) -> Result<Vec<LayerGrads>> {
        if self.layers.is_empty() {
            return Err(Error::State("backward on an empty network".into()));
        }
        backward_chain(&self.layers, loss_grad, prune, false)
    }

    /// All trainable parameters, in layer order.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    /// Parameter gradients flattened from `grads`, aligned with [`Network::params`].
    pub fn param_grads(grads: &[LayerGrads]) -> Vec<&Tensor> {
        grads.iter().flat_map(|g| &g.weight_grads).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
