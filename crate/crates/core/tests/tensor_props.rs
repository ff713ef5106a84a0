//! Property tests for the matmul kernels and the im2col/col2im pair, checked
//! against independent straight-line reference implementations.

use proptest::prelude::*;
use sdgp_core::tensor::{ConvShape, Tensor, col2im, im2col, matmul, matmul_ta, matmul_tb};

/// Exact dyadic values keep products representable; comparisons below are
/// still bitwise, this just keeps the numbers tame.
fn small_val() -> impl Strategy<Value = f32> {
    prop::num::i16::ANY.prop_map(|v| v as f32 / 256.0)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(small_val(), rows * cols)
        .prop_map(move |data| Tensor::new(vec![rows, cols], data).unwrap())
}

fn matmul_case() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=8, 1usize..=8, 1usize..=8).prop_flat_map(|(i, k, j)| (matrix(i, k), matrix(k, j)))
}

/// Reference product with a different loop nest (columns outer) but the same
/// per-element contract: f32 accumulation over ascending k.
fn oracle_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (rows, inner) = (a.shape()[0], a.shape()[1]);
    let cols = b.shape()[1];
    let mut out = vec![0.0f32; rows * cols];
    for col in 0..cols {
        for row in 0..rows {
            let mut acc = 0.0f32;
            for k in 0..inner {
                acc += a.data()[row * inner + k] * b.data()[k * cols + col];
            }
            out[row * cols + col] = acc;
        }
    }
    Tensor::new(vec![rows, cols], out).unwrap()
}

fn transposed(t: &Tensor) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = t.data()[r * cols + c];
        }
    }
    Tensor::new(vec![cols, rows], out).unwrap()
}

proptest! {
    #[test]
    fn matmul_matches_reference_bitwise((a, b) in matmul_case()) {
        let got = matmul(&a, &b).unwrap();
        let want = oracle_matmul(&a, &b);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert_eq!(got.data(), want.data());
    }

    #[test]
    fn transposed_kernels_match_explicit_transposes((a, b) in matmul_case()) {
        // a: [i,k], b: [k,j]. matmul_ta contracts over the first axis of its
        // first argument, matmul_tb over the second axis of its second.
        let ta = matmul_ta(&transposed(&a), &b).unwrap();
        let plain = matmul(&a, &b).unwrap();
        prop_assert_eq!(ta.data(), plain.data());

        let tb = matmul_tb(&a, &transposed(&b)).unwrap();
        prop_assert_eq!(tb.data(), plain.data());
    }
}

/// Valid conv geometry: kernel must fit into the padded input.
fn conv_case() -> impl Strategy<Value = (Tensor, ConvShape)> {
    (1usize..=3, 1usize..=2, 0usize..=2, 1usize..=2, 1usize..=2, 1usize..=2)
        .prop_flat_map(|(kernel, stride, padding, batch, cin, cout)| {
            let min_side = (kernel as isize - 2 * padding as isize).max(1) as usize;
            (Just((kernel, stride, padding, batch, cin, cout)), min_side..=6, min_side..=6)
        })
        .prop_flat_map(|((kernel, stride, padding, batch, cin, cout), height, width)| {
            let conv = ConvShape {
                batch,
                in_channels: cin,
                height,
                width,
                out_channels: cout,
                kernel,
                stride,
                padding,
            };
            prop::collection::vec(small_val(), batch * height * width * cin).prop_map(move |data| {
                (
                    Tensor::new(vec![batch, height, width, cin], data).unwrap(),
                    conv,
                )
            })
        })
}

/// Reference gather: every output row is one kernel window, laid out
/// [ky][kx][channel], with zeros where the window hangs over the edge.
fn oracle_im2col(x: &Tensor, conv: &ConvShape) -> Tensor {
    let (oh, ow) = (conv.out_height(), conv.out_width());
    let (k, c) = (conv.kernel, conv.in_channels);
    let row_len = k * k * c;
    let mut out = vec![0.0f32; conv.batch * oh * ow * row_len];
    let mut row = 0usize;
    for b in 0..conv.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        for ch in 0..c {
                            let v = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < conv.height
                                && (ix as usize) < conv.width
                            {
                                x.data()[(((b * conv.height + iy as usize) * conv.width)
                                    + ix as usize)
                                    * c
                                    + ch]
                            } else {
                                0.0
                            };
                            out[row * row_len + (ky * k + kx) * c + ch] = v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::new(vec![conv.batch * oh * ow, row_len], out).unwrap()
}

proptest! {
    #[test]
    fn im2col_matches_reference((x, conv) in conv_case()) {
        let got = im2col(&x, &conv).unwrap();
        let want = oracle_im2col(&x, &conv);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert_eq!(got.data(), want.data());
    }

    /// col2im is the adjoint of im2col: <im2col(x), y> == <x, col2im(y)>.
    #[test]
    fn col2im_is_the_adjoint(((x, conv), y_seed) in (conv_case(), prop::num::u64::ANY)) {
        let cols = im2col(&x, &conv).unwrap();
        // Deterministic pseudo-random cotangent of the col shape.
        let mut s = y_seed | 1;
        let y_data: Vec<f32> = (0..cols.len())
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as i32 - (1 << 23)) as f32 / (1 << 23) as f32
            })
            .collect();
        let y = Tensor::new(cols.shape().to_vec(), y_data).unwrap();
        let back = col2im(&y, &conv).unwrap();
        prop_assert_eq!(back.shape(), x.shape());

        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        // The net dots can cancel, so scale the tolerance by the absolute
        // mass that f32 rounding acts on, not by the net value.
        let mass: f64 = cols
            .data()
            .iter()
            .zip(y.data())
            .map(|(&a, &b)| (a as f64 * b as f64).abs())
            .sum();
        let scale = mass.max(1.0);
        prop_assert!(
            (lhs - rhs).abs() / scale < 1e-5,
            "adjoint identity violated: {} vs {}",
            lhs,
            rhs
        );
    }
}

#[test]
fn im2col_3x3_windows_on_4x4() {
    // 4x4 single-channel image, 3x3 kernel, stride 1, no padding: the col
    // matrix is 4 rows (2x2 output positions), each one 3x3 window row-major.
    let x = Tensor::new(
        vec![1, 4, 4, 1],
        (1..=16).map(|v| v as f32).collect(),
    )
    .unwrap();
    let conv = ConvShape {
        batch: 1,
        in_channels: 1,
        height: 4,
        width: 4,
        out_channels: 1,
        kernel: 3,
        stride: 1,
        padding: 0,
    };
    let cols = im2col(&x, &conv).unwrap();
    assert_eq!(cols.shape(), [4, 9]);
    let want: [[f32; 9]; 4] = [
        [1., 2., 3., 5., 6., 7., 9., 10., 11.],
        [2., 3., 4., 6., 7., 8., 10., 11., 12.],
        [5., 6., 7., 9., 10., 11., 13., 14., 15.],
        [6., 7., 8., 10., 11., 12., 14., 15., 16.],
    ];
    for (row, want_row) in want.iter().enumerate() {
        assert_eq!(&cols.data()[row * 9..(row + 1) * 9], want_row, "row {row}");
    }
}

#[test]
fn col2im_accumulates_overlapping_windows() {
    // With a col matrix of ones, every input pixel receives one unit per
    // window that covers it.
    let conv = ConvShape {
        batch: 1,
        in_channels: 1,
        height: 4,
        width: 4,
        out_channels: 1,
        kernel: 3,
        stride: 1,
        padding: 0,
    };
    let ones = Tensor::filled(&[4, 9], 1.0).unwrap();
    let back = col2im(&ones, &conv).unwrap();
    let want = [
        1., 2., 2., 1., //
        2., 4., 4., 2., //
        2., 4., 4., 2., //
        1., 2., 2., 1.,
    ];
    assert_eq!(back.data(), want);
}
