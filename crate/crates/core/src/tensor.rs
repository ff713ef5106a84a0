//! Dense tensors and the matrix forms of convolution.
//!
//! Tensors are contiguous `f32` buffers in row-major order with the channel
//! dimension last, so channels always have stride 1 and an m-wide group of
//! channels is a contiguous slice. Operations return new tensors; a tensor is
//! never mutated once an operation has returned it.
//!
//! The matmul kernels use one fixed loop nest each. For a given output
//! element the products are accumulated in ascending `k` order, exactly like
//! the naive triple loop, so results are reproducible across runs and
//! machines and can be compared bit-for-bit.

use crate::error::{Error, Result};

/// Dense row-major tensor with positive extents and finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` is non-empty with positive
    /// extents, that `data` has exactly `shape.iter().product()` elements,
    /// and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let len = checked_numel(&shape)?;
        if data.len() != len {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {len} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = checked_numel(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn filled(shape: &[usize], value: f32) -> Result<Self> {
        let len = checked_numel(shape)?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite fill value {value}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for optimizers and tests. The finiteness invariant is
    /// the caller's to keep; every operation re-checks on construction.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Splits the tensor into its shape and buffer, for rebuilding through
    /// [`Tensor::new`] after in-place edits (which re-checks finiteness).
    pub(crate) fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    /// Size of the trailing (channel) dimension.
    pub fn channels(&self) -> usize {
        *self.shape.last().expect("shape is non-empty")
    }

    /// Element at a full multi-dimensional index. Intended for tests; hot
    /// paths index the flat buffer directly.
    pub fn at(&self, index: &[usize]) -> f32 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} ({ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        self.clone().into_reshaped(shape)
    }

    /// Reshape without copying the buffer.
    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let len = checked_numel(shape)?;
        if len != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements into {shape:?}",
                self.data.len()
            )));
        }
        self.shape.clear();
        self.shape.extend_from_slice(shape);
        Ok(self)
    }

    /// Interprets the tensor as a matrix: all leading axes merged into rows,
    /// the trailing axis as columns.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = self.channels();
        (self.data.len() / cols, cols)
    }

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension(format!(
                "{op} needs a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Dimension("shape must have at least one axis".into()));
    }
    let mut len = 1usize;
    for (i, &ext) in shape.iter().enumerate() {
        if ext == 0 {
            return Err(Error::Dimension(format!("axis {i} has zero extent")));
        }
        len = len
            .checked_mul(ext)
            .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows usize")))?;
    }
    Ok(len)
}

/// `a (r x k) * b (k x c)`, accumulated in ascending `k` per output element.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ak) = a.dims2("matmul lhs")?;
    let (bk, bc) = b.dims2("matmul rhs")?;
    if ak != bk {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {ar}x{ak} * {bk}x{bc}"
        )));
    }
    let mut out = vec![0.0f32; ar * bc];
    for i in 0..ar {
        let arow = &a.data[i * ak..(i + 1) * ak];
        let orow = &mut out[i * bc..(i + 1) * bc];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &b.data[k * bc..(k + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![ar, bc], out)
}

/// `transpose(a) * b` for `a (k x r)`, `b (k x c)`, without materializing the
/// transpose. Ascending-`k` accumulation, like [`matmul`].
pub fn matmul_ta(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ak, ar) = a.dims2("matmul_ta lhs")?;
    let (bk, bc) = b.dims2("matmul_ta rhs")?;
    if ak != bk {
        return Err(Error::Dimension(format!(
            "matmul_ta inner extents differ: {ak}x{ar} (transposed) * {bk}x{bc}"
        )));
    }
    let mut out = vec![0.0f32; ar * bc];
    for k in 0..ak {
        let arow = &a.data[k * ar..(k + 1) * ar];
        let brow = &b.data[k * bc..(k + 1) * bc];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * bc..(i + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![ar, bc], out)
}

/// `a * transpose(b)` for `a (r x k)`, `b (c x k)`. Materializes the
/// transpose of `b` and reuses the [`matmul`] nest, so per output element the
/// accumulation is the same ascending-`k` sum (and vectorizes the same way).
pub fn matmul_tb(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ar, ak) = a.dims2("matmul_tb lhs")?;
    let (bc, bk) = b.dims2("matmul_tb rhs")?;
    if ak != bk {
        return Err(Error::Dimension(format!(
            "matmul_tb inner extents differ: {ar}x{ak} * {bc}x{bk} (transposed)"
        )));
    }
    let mut bt = vec![0.0f32; bk * bc];
    for j in 0..bc {
        for k in 0..bk {
            bt[k * bc + j] = b.data[j * bk + k];
        }
    }
    let mut out = vec![0.0f32; ar * bc];
    for i in 0..ar {
        let arow = &a.data[i * ak..(i + 1) * ak];
        let orow = &mut out[i * bc..(i + 1) * bc];
        for (k, &av) in arow.iter().enumerate() {
            let brow = &bt[k * bc..(k + 1) * bc];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![ar, bc], out)
}

/// Geometry of one convolution application: batched channels-last input,
/// square kernel, symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch", self.batch),
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("out_channels", self.out_channels),
            ("kernel", self.kernel),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(Error::Dimension(format!("conv {name} must be positive")));
            }
        }
        if self.height + 2 * self.padding < self.kernel
            || self.width + 2 * self.padding < self.kernel
        {
            return Err(Error::Dimension(format!(
                "kernel {k} does not fit into {h}x{w} input with padding {p}",
                k = self.kernel,
                h = self.height,
                w = self.width,
                p = self.padding
            )));
        }
        Ok(())
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// `[batch, height, width, in_channels]`
    pub fn input_dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.in_channels]
    }

    /// `[batch, out_height, out_width, out_channels]`
    pub fn output_dims(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_height(),
            self.out_width(),
            self.out_channels,
        ]
    }

    /// Shape of the lowered column matrix: one row per output position.
    pub fn col_dims(&self) -> [usize; 2] {
        [
            self.batch * self.out_height() * self.out_width(),
            self.kernel * self.kernel * self.in_channels,
        ]
    }
}

/// Lowers a `[B, H, W, C]` input to the column matrix of its receptive
/// fields. Row `((b * outH) + oy) * outW + ox` holds the window for output
/// position `(b, oy, ox)`, laid out kernel-row major with channels innermost:
/// `[ky][kx][c]`. Out-of-bounds taps read as zero.
pub fn im2col(input: &Tensor, conv: &ConvShape) -> Result<Tensor> {
    conv.validate()?;
    if input.shape() != conv.input_dims() {
        return Err(Error::Dimension(format!(
            "im2col input shape {:?} does not match conv input {:?}",
            input.shape(),
            conv.input_dims()
        )));
    }
    let [rows, row_len] = conv.col_dims();
    let mut out = vec![0.0f32; rows * row_len];
    let src = input.data();
    for_each_window(conv, |row, ky, iy, kx, ix| {
        let c = conv.in_channels;
        let dst_base = row * row_len + (ky * conv.kernel + kx) * c;
        let src_base = ((iy * conv.width) + ix) * c;
        out[dst_base..dst_base + c].copy_from_slice(&src[src_base..src_base + c]);
    });
    Tensor::new(vec![rows, row_len], out)
}

/// Adjoint of [`im2col`]: scatter-adds column-matrix values back onto the
/// `[B, H, W, C]` image grid, so `dot(im2col(x), y) == dot(x, col2im(y))`.
pub fn col2im(cols: &Tensor, conv: &ConvShape) -> Result<Tensor> {
    conv.validate()?;
    let [rows, row_len] = conv.col_dims();
    if cols.shape() != [rows, row_len] {
        return Err(Error::Dimension(format!(
            "col2im input shape {:?} does not match column matrix {:?}",
            cols.shape(),
            [rows, row_len]
        )));
    }
    let mut out = vec![0.0f32; conv.batch * conv.height * conv.width * conv.in_channels];
    let src = cols.data();
    for_each_window(conv, |row, ky, iy, kx, ix| {
        let c = conv.in_channels;
        let src_base = row * row_len + (ky * conv.kernel + kx) * c;
        let dst_base = ((iy * conv.width) + ix) * c;
        for (dst, &v) in out[dst_base..dst_base + c]
            .iter_mut()
            .zip(&src[src_base..src_base + c])
        {
            *dst += v;
        }
    });
    Tensor::new(conv.input_dims().to_vec(), out)
}

/// Visits every in-bounds kernel tap of every output position, in a fixed
/// order: batch, output row, output column, kernel row, kernel column. The
/// callback receives the column-matrix row and image coordinates with the
/// batch offset already folded into `iy`.
fn for_each_window(conv: &ConvShape, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (oh, ow) = (conv.out_height(), conv.out_width());
    let mut row = 0;
    for b in 0..conv.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..conv.kernel {
                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                    if iy < 0 || iy >= conv.height as isize {
                        continue;
                    }
                    for kx in 0..conv.kernel {
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if ix < 0 || ix >= conv.width as isize {
                            continue;
                        }
                        let iy_abs = b * conv.height + iy as usize;
                        f(row, ky, iy_abs, kx, ix as usize);
                    }
                }
                row += 1;
            }
        }
    }
}
