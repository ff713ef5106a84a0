//! Finite-difference verification of every layer's analytic gradient, and
//! the bit-level contracts the backward pass makes about pruning: n = m is
//! exactly a no-op, weight gradients never see the pruned signal, and the
//! network's first layer always runs dense.
//!
//! Central differences break at kinks: if a perturbation pushes a relu input
//! (or a pool tie) across zero, the estimate averages two linear pieces and
//! disagrees with the one-sided analytic value by a non-small amount. Layers
//! are therefore checked two ways: each layer in isolation under a smooth
//! quadratic loss with inputs placed away from its kinks, and whole networks
//! end to end with seeds whose kink margins are verified to exceed the
//! perturbation's reach.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdgp_core::config::{self, LayerSpec, ModelSpec};
use sdgp_core::gradcheck::{max_relative_error, numerical_grad};
use sdgp_core::nn::loss::{softmax_cross_entropy, softmax_cross_entropy_grad};
use sdgp_core::nn::{
    BatchNorm, Conv2d, Layer, LayerGrads, Linear, MaxPool2d, Mode, Network, Relu, Residual,
};
use sdgp_core::prune::{PruneConfig, PruneFunction};
use sdgp_core::tensor::Tensor;

const SMOOTHING: f32 = 0.1;
const FD_EPS: f32 = 1e-2;
const FD_TOL: f64 = 1e-3;

/// Comparison floor: elements well below the tensor's own gradient scale
/// are compared at that scale instead of relatively, because the f32
/// forward pass leaves the finite difference a noise floor of roughly 1e-4
/// in absolute terms.
fn fd_floor(analytic: &[f32], numeric: &[f64]) -> f64 {
    let ga = analytic.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let gn = numeric.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    (0.25 * ga.max(gn)).max(0.1)
}

fn assert_close(name: &str, what: &str, analytic: &[f32], numeric: &[f64]) {
    let err = max_relative_error(analytic, numeric, fd_floor(analytic, numeric));
    assert!(
        err < FD_TOL,
        "{name}: {what} disagrees with finite differences, max relative error {err:.2e}"
    );
}

fn uniform(shape: &[usize], limit: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * limit).collect(),
    )
    .unwrap()
}

/// Quadratic scalar loss 0.5 * ||y||^2, whose gradient at y is y itself.
fn quadratic(y: &Tensor) -> f64 {
    y.data().iter().map(|&v| 0.5 * (v as f64).powi(2)).sum()
}

/// Checks one layer in isolation: analytic parameter and input gradients of
/// L = 0.5 * ||layer(x)||^2 against central differences.
fn check_layer(name: &str, layer: &Layer, input: &Tensor) {
    let net = Network::new(vec![layer.clone()]);

    let mut fwd = net.clone();
    let y = fwd.forward(input, Mode::Train).unwrap();
    let grads = fwd.backward(&y, None).unwrap();

    let eval = |candidate: &Network, x: &Tensor| -> f64 {
        let mut n = candidate.clone();
        let y = n.forward(x, Mode::Train).unwrap();
        quadratic(&y)
    };

    let params: Vec<Tensor> = net.params().into_iter().cloned().collect();
    for (k, param) in params.iter().enumerate() {
        let numeric = numerical_grad(
            param,
            |probe| {
                let mut candidate = net.clone();
                *candidate.params_mut()[k] = probe.clone();
                Ok(eval(&candidate, input))
            },
            FD_EPS,
        )
        .unwrap();
        assert_close(name, &format!("parameter {k}"), grads[0].weight_grads[k].data(), &numeric);
    }

    let numeric = numerical_grad(input, |probe| Ok(eval(&net, probe)), FD_EPS).unwrap();
    assert_close(name, "input gradient", grads[0].data_grad.data(), &numeric);
}

#[test]
fn conv_layer_matches_finite_differences() {
    // Padding, stride 1: every weight touches the input many times.
    let w = uniform(&[3 * 3 * 2, 3], 0.5, 1);
    let b = uniform(&[3], 0.3, 2);
    let layer = Layer::Conv(Conv2d::new(2, 3, 3, 1, 1, w, b).unwrap());
    check_layer("conv 3x3 pad 1", &layer, &uniform(&[2, 5, 5, 2], 1.0, 3));

    // Strided and unpadded.
    let w = uniform(&[2 * 2 * 3, 4], 0.5, 4);
    let b = uniform(&[4], 0.3, 5);
    let layer = Layer::Conv(Conv2d::new(3, 4, 2, 2, 0, w, b).unwrap());
    check_layer("conv 2x2 stride 2", &layer, &uniform(&[2, 6, 6, 3], 1.0, 6));
}

#[test]
fn linear_layer_matches_finite_differences() {
    let w = uniform(&[12, 5], 0.5, 7);
    let b = uniform(&[5], 0.3, 8);
    let layer = Layer::Linear(Linear::new(12, 5, w, b).unwrap());
    // Higher-rank input exercises the flatten/restore path.
    check_layer("linear", &layer, &uniform(&[3, 2, 2, 3], 1.0, 9));
}

#[test]
fn batchnorm_layer_matches_finite_differences() {
    let mut bn = Layer::BatchNorm(BatchNorm::new(4).unwrap());
    // Move gamma/beta off their 1/0 init so their gradients interact.
    let gamma: Vec<f32> = uniform(&[4], 0.4, 10).data().iter().map(|v| v + 1.0).collect();
    *bn.params_mut()[0] = Tensor::new(vec![4], gamma).unwrap();
    *bn.params_mut()[1] = uniform(&[4], 0.3, 11);
    check_layer("batchnorm", &bn, &uniform(&[4, 3, 3, 4], 1.0, 12));
}

#[test]
fn relu_layer_matches_finite_differences() {
    // Kink at zero: keep every input at least 0.2 away from it, far beyond
    // the 1e-2 perturbation.
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data: Vec<f32> = (0..2 * 4 * 4 * 2)
        .map(|_| {
            let mag = 0.2 + rng.random::<f32>();
            if rng.random::<bool>() { mag } else { -mag }
        })
        .collect();
    let input = Tensor::new(vec![2, 4, 4, 2], data).unwrap();
    check_layer("relu", &Layer::Relu(Relu::new()), &input);
}

#[test]
fn maxpool_layer_matches_finite_differences() {
    // Ties are the pool's kink: build windows from a shuffled grid with a
    // minimum spacing of 0.05 between any two values.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 1 * 6 * 6 * 2;
    let mut values: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.05).collect();
    for i in (1..values.len()).rev() {
        let j = (rng.random::<u32>() as usize) % (i + 1);
        values.swap(i, j);
    }
    let input = Tensor::new(vec![1, 6, 6, 2], values).unwrap();
    let layer = Layer::MaxPool(MaxPool2d::new(2, 2).unwrap());
    check_layer("maxpool 2x2", &layer, &input);

    // Overlapping windows (stride < size) share inputs.
    let layer = Layer::MaxPool(MaxPool2d::new(3, 1).unwrap());
    check_layer("maxpool 3x3 stride 1", &layer, &input);
}

#[test]
fn residual_block_matches_finite_differences() {
    // Smooth body (convs only), so the block itself is the only thing under
    // test; relu interplay is covered by the end-to-end checks.
    let w1 = uniform(&[3 * 3 * 2, 2], 0.4, 15);
    let b1 = uniform(&[2], 0.2, 16);
    let w2 = uniform(&[3 * 3 * 2, 2], 0.4, 17);
    let b2 = uniform(&[2], 0.2, 18);
    let body = vec![
        Layer::Conv(Conv2d::new(2, 2, 3, 1, 1, w1, b1).unwrap()),
        Layer::Conv(Conv2d::new(2, 2, 3, 1, 1, w2, b2).unwrap()),
    ];
    let layer = Layer::Residual(Residual::new(body).unwrap());
    check_layer("residual", &layer, &uniform(&[2, 4, 4, 2], 1.0, 19));
}

/// Smallest |relu input| and smallest pool top-two gap across the forward
/// pass; both must comfortably exceed what one 1e-2 perturbation can move
/// (bounded by the largest upstream activation, which is O(1) here).
fn kink_margins(layers: &mut [Layer], input: &Tensor) -> (f32, f32, Tensor) {
    let mut min_relu = f32::INFINITY;
    let mut min_gap = f32::INFINITY;
    let out = walk(layers, input, &mut min_relu, &mut min_gap);
    return (min_relu, min_gap, out);

    fn walk(layers: &mut [Layer], input: &Tensor, min_relu: &mut f32, min_gap: &mut f32) -> Tensor {
        let mut cur = input.clone();
        for layer in layers {
            match layer {
                Layer::Relu(_) => {
                    for &v in cur.data() {
                        *min_relu = min_relu.min(v.abs());
                    }
                }
                Layer::MaxPool(p) => {
                    *min_gap = min_gap.min(pool_gap(&cur, p.size, p.stride));
                }
                Layer::Residual(r) => {
                    let body_out = walk(&mut r.body, &cur, min_relu, min_gap);
                    let sum: Vec<f32> = body_out
                        .data()
                        .iter()
                        .zip(cur.data())
                        .map(|(&a, &b)| a + b)
                        .collect();
                    // Keep caches consistent for the later backward call.
                    cur = layer.forward(&cur, Mode::Train).unwrap();
                    assert_eq!(cur.data(), sum.as_slice());
                    continue;
                }
                _ => {}
            }
            cur = layer.forward(&cur, Mode::Train).unwrap();
        }
        cur
    }

    fn pool_gap(x: &Tensor, size: usize, stride: usize) -> f32 {
        let &[batch, height, width, channels] = x.shape() else {
            panic!("pool input must be rank 4");
        };
        let mut gap = f32::INFINITY;
        let oh = (height - size) / stride + 1;
        let ow = (width - size) / stride + 1;
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for c in 0..channels {
                        let mut best = f32::NEG_INFINITY;
                        let mut second = f32::NEG_INFINITY;
                        for wy in 0..size {
                            for wx in 0..size {
                                let iy = oy * stride + wy;
                                let ix = ox * stride + wx;
                                let v = x.data()[((b * height + iy) * width + ix) * channels + c];
                                if v > best {
                                    second = best;
                                    best = v;
                                } else if v > second {
                                    second = v;
                                }
                            }
                        }
                        if second.is_finite() {
                            gap = gap.min(best - second);
                        }
                    }
                }
            }
        }
        gap
    }
}

fn build(layers: Vec<LayerSpec>, dims: (usize, usize, usize), classes: usize, seed: u64) -> Network {
    config::build_network(&ModelSpec { layers }, dims, classes, None, seed).unwrap()
}

fn loss_of(net: &Network, input: &Tensor, labels: &[u32]) -> f64 {
    let mut probe_net = net.clone();
    let logits = probe_net.forward(input, Mode::Train).unwrap();
    softmax_cross_entropy(&logits, labels, SMOOTHING).unwrap().0
}

fn backward_grads(
    net: &Network,
    input: &Tensor,
    labels: &[u32],
    prune: Option<&PruneConfig>,
) -> Vec<LayerGrads> {
    let mut fwd = net.clone();
    let logits = fwd.forward(input, Mode::Train).unwrap();
    let (_, probs) = softmax_cross_entropy(&logits, labels, SMOOTHING).unwrap();
    let dlogits = softmax_cross_entropy_grad(&probs, labels, SMOOTHING).unwrap();
    fwd.backward(&dlogits, prune).unwrap()
}

/// Margins every activation must keep from its nearest kink. One probe
/// perturbation moves a preactivation by at most eps times the largest
/// upstream activation (O(1) here), so a handful of eps is safe; batchnorm
/// amplifies by its inverse standard deviation, hence the larger margin
/// when one is in the net.
#[derive(Clone, Copy)]
struct Margins {
    relu: f32,
    pool_gap: f32,
}

const PLAIN_MARGINS: Margins = Margins { relu: 0.03, pool_gap: 0.06 };
const BN_MARGINS: Margins = Margins { relu: 0.1, pool_gap: 0.06 };

/// Builds the network and input from the first seed (scanning upward from
/// `base_seed`) whose forward pass keeps every relu input and pool gap away
/// from the kinks. Deterministic: the scan always lands on the same seed.
/// Nets must stay small (tens of kink sites), or no seed will qualify.
fn find_clean_configuration(
    base_seed: u64,
    margins: Margins,
    make: impl Fn(u64) -> (Network, Tensor),
) -> (Network, Tensor) {
    // Each candidate costs one tiny forward pass; margins this wide only
    // hit every few dozen seeds.
    for seed in base_seed..base_seed + 5000 {
        let (net, input) = make(seed);
        let (relu_margin, pool_gap, _) = kink_margins(net.clone().layers_mut(), &input);
        if relu_margin > margins.relu && pool_gap > margins.pool_gap {
            return (net, input);
        }
    }
    panic!("no seed in [{base_seed}, {base_seed}+5000) gives clean kink margins");
}

/// End-to-end check through forward + softmax cross-entropy. The
/// configuration must come from `find_clean_configuration`; the guard turns
/// a kink-contaminated setup into a clear message instead of a mystery
/// failure.
fn check_network(name: &str, net: &Network, input: &Tensor, labels: &[u32], margins: Margins) {
    let (relu_margin, pool_gap, _) = kink_margins(net.clone().layers_mut(), input);
    assert!(
        relu_margin > margins.relu && pool_gap > margins.pool_gap,
        "{name}: an activation sits too close to a kink for finite differences \
         (relu margin {relu_margin:.4}, pool gap {pool_gap:.4})"
    );

    let grads = backward_grads(net, input, labels, None);
    let analytic_params: Vec<Tensor> = Network::param_grads(&grads)
        .into_iter()
        .cloned()
        .collect();
    let params: Vec<Tensor> = net.params().into_iter().cloned().collect();

    for (k, param) in params.iter().enumerate() {
        let numeric = numerical_grad(
            param,
            |probe| {
                let mut candidate = net.clone();
                *candidate.params_mut()[k] = probe.clone();
                Ok(loss_of(&candidate, input, labels))
            },
            FD_EPS,
        )
        .unwrap();
        assert_close(name, &format!("parameter {k}"), analytic_params[k].data(), &numeric);
    }

    let numeric = numerical_grad(input, |probe| Ok(loss_of(net, probe, labels)), FD_EPS).unwrap();
    assert_close(name, "input gradient", grads[0].data_grad.data(), &numeric);
}

fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_channels,
        kernel,
        stride,
        padding,
    }
}

#[test]
fn conv_pool_relu_linear_matches_finite_differences() {
    // Pool sits before relu: after relu, windows of clamped zeros tie
    // exactly, and relu(max(x)) == max(relu(x)) anyway. The net is kept
    // tiny on purpose: the seed scan needs every pool window AND every
    // relu input clear of its kink at once, and the odds of that decay
    // geometrically in the number of sites.
    let (net, input) = find_clean_configuration(11, PLAIN_MARGINS, |seed| {
        let layers = vec![
            conv(3, 3, 1, 1),
            LayerSpec::MaxPool { size: 2, stride: None },
            LayerSpec::Relu,
            LayerSpec::Linear { out_features: 3 },
        ];
        (
            build(layers, (4, 4, 1), 3, seed),
            uniform(&[2, 4, 4, 1], 1.0, seed ^ 0xABCD),
        )
    });
    check_network("conv/pool/relu/linear", &net, &input, &[0, 2], PLAIN_MARGINS);
}

#[test]
fn strided_conv_batchnorm_matches_finite_differences() {
    let (net, input) = find_clean_configuration(12, BN_MARGINS, |seed| {
        let layers = vec![
            conv(3, 3, 2, 1),
            LayerSpec::BatchNorm,
            LayerSpec::Relu,
            LayerSpec::Linear { out_features: 2 },
        ];
        (
            build(layers, (4, 4, 2), 2, seed),
            uniform(&[2, 4, 4, 2], 1.0, seed ^ 0xABCD),
        )
    });
    check_network("strided conv/batchnorm", &net, &input, &[1, 0], BN_MARGINS);
}

#[test]
fn residual_network_matches_finite_differences() {
    let (net, input) = find_clean_configuration(13, PLAIN_MARGINS, |seed| {
        let layers = vec![
            conv(3, 3, 1, 1),
            LayerSpec::Residual {
                body: vec![conv(3, 3, 1, 1), LayerSpec::Relu, conv(3, 3, 1, 1)],
            },
            LayerSpec::Relu,
            LayerSpec::Linear { out_features: 2 },
        ];
        (
            build(layers, (3, 3, 1), 2, seed),
            uniform(&[1, 3, 3, 1], 1.0, seed ^ 0xABCD),
        )
    });
    check_network("residual network", &net, &input, &[1], PLAIN_MARGINS);
}

#[test]
fn softmax_cross_entropy_gradient_matches_finite_differences() {
    let logits = uniform(&[4, 5], 1.0, 25);
    let labels = [0u32, 3, 2, 4];
    for smoothing in [0.0f32, 0.1] {
        let (_, probs) = softmax_cross_entropy(&logits, &labels, smoothing).unwrap();
        let analytic = softmax_cross_entropy_grad(&probs, &labels, smoothing).unwrap();
        let numeric = numerical_grad(
            &logits,
            |probe| Ok(softmax_cross_entropy(probe, &labels, smoothing).unwrap().0),
            1e-3,
        )
        .unwrap();
        let err = max_relative_error(analytic.data(), &numeric, 1e-3);
        assert!(err < FD_TOL, "loss gradient (smoothing {smoothing}) off by {err:.2e}");
    }
}

fn study_net_and_input() -> (Network, Tensor, Vec<u32>) {
    // Two stacked convs so pruning at the upper conv visibly changes what
    // the lower conv receives.
    let layers = vec![
        conv(4, 3, 1, 1),
        LayerSpec::Relu,
        conv(8, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2, stride: None },
        LayerSpec::Linear { out_features: 4 },
    ];
    let net = build(layers, (6, 6, 2), 4, 31);
    let input = uniform(&[3, 6, 6, 2], 1.0, 41);
    (net, input, vec![0, 1, 3])
}

fn flatten_all(grads: &[LayerGrads]) -> (Vec<u32>, Vec<u32>) {
    let weights: Vec<u32> = grads
        .iter()
        .flat_map(|g| g.weight_grads.iter())
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect();
    let data: Vec<u32> = grads
        .iter()
        .flat_map(|g| g.data_grad.data().iter().map(|v| v.to_bits()))
        .collect();
    (weights, data)
}

#[test]
fn n_equals_m_pruning_is_bit_identical_to_disabled() {
    let (net, input, labels) = study_net_and_input();
    let dense = flatten_all(&backward_grads(&net, &input, &labels, None));
    for function in [
        PruneFunction::Random,
        PruneFunction::Magnitude,
        PruneFunction::RescaledMagnitude,
    ] {
        let cfg = PruneConfig::new(function, 4, 4).with_seed(777);
        let pruned = flatten_all(&backward_grads(&net, &input, &labels, Some(&cfg)));
        assert_eq!(dense, pruned, "{function:?} 4:4 must be exactly dense");
    }
}

#[test]
fn weight_gradients_never_see_the_pruned_signal() {
    let (net, input, labels) = study_net_and_input();
    // Layer 2 is the upper conv; nothing above it prunes, so its incoming
    // gradient is fixed and its weight gradient must be bit-identical no
    // matter which prune function runs at it.
    let dense = backward_grads(&net, &input, &labels, None);
    let dense_upper: Vec<Vec<u32>> = dense[2]
        .weight_grads
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect();

    let mut lower_changed = false;
    for function in [
        PruneFunction::Random,
        PruneFunction::Magnitude,
        PruneFunction::RescaledMagnitude,
    ] {
        let cfg = PruneConfig::new(function, 1, 4).with_seed(5);
        let pruned = backward_grads(&net, &input, &labels, Some(&cfg));
        let upper: Vec<Vec<u32>> = pruned[2]
            .weight_grads
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(dense_upper, upper, "{function:?} leaked into the upper conv's weight grads");

        if pruned[0].weight_grads[0].data() != dense[0].weight_grads[0].data() {
            lower_changed = true;
        }
    }
    // The check above is only meaningful if pruning actually altered what
    // flows downward: the lower conv's weight grads must differ somewhere.
    assert!(lower_changed, "1:4 pruning should change the lower conv's weight gradient");
}

#[test]
fn first_layer_conv_always_runs_dense() {
    // A net whose only conv is the first layer: pruning must be a no-op on
    // every gradient, because the first layer's data gradient is never
    // consumed and its weight path is dense by construction.
    let layers = vec![
        conv(4, 3, 1, 1),
        LayerSpec::Relu,
        LayerSpec::Linear { out_features: 2 },
    ];
    let net = build(layers, (4, 4, 1), 2, 15);
    let input = uniform(&[2, 4, 4, 1], 1.0, 26);
    let labels = [0u32, 1];

    let dense = flatten_all(&backward_grads(&net, &input, &labels, None));
    let cfg = PruneConfig::new(PruneFunction::Random, 1, 4).with_seed(9);
    let pruned = flatten_all(&backward_grads(&net, &input, &labels, Some(&cfg)));
    assert_eq!(dense, pruned);
}
