//! Dense row-major tensors and the numeric kernels the models are built from.
//!
//! Image batches use NCHW order. All reductions walk their operands in
//! row-major order sequentially so repeated runs are bit-identical.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} values but {got} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("reduction over an empty axis")]
    EmptyAxis,
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// A rank-1 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid {
                op: "from_rows",
                reason: "ragged rows".into(),
            });
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single stored value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        }
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_outer(&self, indices: &[usize]) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_outer(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_outer",
            reason: "no parts".into(),
        })?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_outer",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Elementwise and broadcast kernels

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Which elements of the gating tensor let the gradient through, and with what factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    /// 1 where the gate is strictly positive, else 0 (ReLU).
    Positive,
    /// sign of the gate, with sign(0) = 0 (absolute value).
    Sign,
    /// 1 where lo < gate < hi, else 0 (clipping).
    Inside(f64, f64),
}

impl Gate {
    pub fn factor(self, v: f64) -> f64 {
        match self {
            Gate::Positive => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Gate::Sign => sign(v),
            Gate::Inside(lo, hi) => {
                if v > lo && v < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// sign with sign(0) = 0.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn gate(values: &Tensor, by: &Tensor, kind: Gate) -> Result<Tensor> {
    values.zip_map(by, "gate", |v, g| v * kind.factor(g))
}

/// Layout of a per-channel bias: the bias runs along the middle axis of a
/// tensor viewed as `[outer, channels, inner]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiasLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BiasLayout {
    /// Bias along axis 1 of `shape` (last axis of a matrix, channel axis of NCHW).
    pub fn for_shape(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(TensorError::Invalid {
                op: "bias",
                reason: format!("bias needs rank >= 2, got {shape:?}"),
            });
        }
        Ok(Self {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        })
    }
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let layout = BiasLayout::for_shape(x.shape())?;
    if bias.len() != layout.channels {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            left: x.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let b = bias.data();
    for (chunk_idx, chunk) in out.data_mut().chunks_mut(layout.inner.max(1)).enumerate() {
        let c = chunk_idx % layout.channels;
        for v in chunk.iter_mut() {
            *v += b[c];
        }
    }
    Ok(out)
}

/// Sums over everything except the bias channel axis.
pub fn reduce_bias(x: &Tensor) -> Result<Tensor> {
    let layout = BiasLayout::for_shape(x.shape())?;
    let mut acc = vec![0.0; layout.channels];
    if layout.inner > 0 {
        for (chunk_idx, chunk) in x.data().chunks(layout.inner).enumerate() {
            let c = chunk_idx % layout.channels;
            for &v in chunk {
                acc[c] += v;
            }
        }
    }
    Tensor::new(vec![layout.channels], acc)
}

/// Repeats a per-channel vector over `shape` (inverse layout of [`reduce_bias`]).
pub fn broadcast_bias(bias: &Tensor, shape: &[usize]) -> Result<Tensor> {
    add_bias(&Tensor::zeros(shape.to_vec()), bias)
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

/// Row sums of a matrix, `[n, q] -> [n, 1]`.
pub fn row_sum(x: &Tensor) -> Result<Tensor> {
    let (n, q) = matrix_dims(x, "row_sum")?;
    let data = (0..n)
        .map(|i| x.data()[i * q..(i + 1) * q].iter().sum())
        .collect();
    Tensor::new(vec![n, 1], data)
}

/// Repeats a column vector `[n, 1]` across `q` columns.
pub fn broadcast_cols(x: &Tensor, q: usize) -> Result<Tensor> {
    let (n, one) = matrix_dims(x, "broadcast_cols")?;
    if one != 1 {
        return Err(TensorError::Invalid {
            op: "broadcast_cols",
            reason: format!("expected [n, 1], got {:?}", x.shape()),
        });
    }
    let mut data = Vec::with_capacity(n * q);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, q));
    }
    Tensor::new(vec![n, q], data)
}

/// Numerically stable `log Σ exp` over each row, `[n, q] -> [n, 1]`.
pub fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let (n, q) = matrix_dims(x, "logsumexp_rows")?;
    if q == 0 {
        return Err(TensorError::EmptyAxis);
    }
    let data = (0..n)
        .map(|i| {
            let row = &x.data()[i * q..(i + 1) * q];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Tensor::new(vec![n, 1], data)
}

fn matrix_dims(x: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        &[n, q] => Ok((n, q)),
        other => Err(TensorError::Invalid {
            op,
            reason: format!("expected a matrix, got shape {other:?}"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Matrix products

/// `op(a) · op(b)` where `op` transposes when the flag is set.
pub fn matmul(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = matrix_dims(a, "matmul")?;
    let (br, bc) = matrix_dims(b, "matmul")?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(
        m,
        k,
        n,
        a.data(),
        ac,
        trans_a,
        b.data(),
        bc,
        trans_b,
        &mut out,
    );
    Tensor::new(vec![m, n], out)
}

/// `c = op(a) · op(b)` on raw row-major buffers. `lda`/`ldb` are the stored row lengths.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    lda: usize,
    trans_a: bool,
    b: &[f64],
    ldb: usize,
    trans_b: bool,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, lda as isize)
    } else {
        (lda as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, ldb as isize)
    } else {
        (ldb as isize, 1)
    };
    // SAFETY: the strides above describe exactly the m×k and k×n views of the
    // row-major buffers, whose lengths the callers have checked.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer: `input · weight + bias`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let out = matmul(input, weight, false, false)?;
    add_bias(&out, bias)
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        })
    }
}

impl std::str::FromStr for Padding {
    type Err = TensorError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Padding::Valid),
            "same" => Ok(Padding::Same),
            other => Err(TensorError::Invalid {
                op: "padding",
                reason: format!("unknown padding {other:?}"),
            }),
        }
    }
}

/// Output extent and leading (top/left) padding along one spatial axis.
pub fn conv_output_extent(
    input: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if k == 0 || stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("kernel size {k} and stride {stride} must be positive"),
        });
    }
    match padding {
        Padding::Valid => {
            if input < k {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    reason: format!("valid convolution needs extent {input} >= kernel {k}"),
                });
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

/// Everything needed to run a convolution or either of its adjoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input_shape, kernel_shape) else {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: format!(
                    "expected NCHW input and FCkk kernel, got {input_shape:?} and {kernel_shape:?}"
                ),
            });
        };
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input_shape.to_vec(),
                right: kernel_shape.to_vec(),
            });
        }
        if kh != kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: "kernels must be square".into(),
            });
        }
        let (out_h, pad_top) = conv_output_extent(h, kh, stride, padding)?;
        let (out_w, pad_left) = conv_output_extent(w, kw, stride, padding)?;
        Ok(Self {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            filters: f,
            k: kh,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.in_h, self.in_w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.filters, self.in_channels, self.k, self.k]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input pixel feeding output position (oy, ox) at kernel offset (ky, kx), if not padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.in_h && x < self.in_w).then_some((y, x))
    }

    /// Unfolds one image into a `[positions, patch_len]` matrix.
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * pl..][..pl];
                let mut idx = 0;
                for c in 0..self.in_channels {
                    let plane = &image[c * self.in_h * self.in_w..];
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            row[idx] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => plane[y * self.in_w + x],
                                None => 0.0,
                            };
                            idx += 1;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters patch rows back into an image (accumulating).
    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * pl..][..pl];
                let mut idx = 0;
                for c in 0..self.in_channels {
                    let base = c * self.in_h * self.in_w;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                image[base + y * self.in_w + x] += row[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

fn check_shape(t: &Tensor, expected: Vec<usize>, op: &'static str) -> Result<()> {
    if t.shape() != expected.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: expected,
        });
    }
    Ok(())
}

/// Cross-correlation without bias.
pub fn conv2d_raw(input: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    check_shape(input, geom.input_shape(), "conv2d")?;
    check_shape(kernel, geom.kernel_shape(), "conv2d")?;
    let (p, pl, f) = (geom.positions(), geom.patch_len(), geom.filters);
    let in_len = geom.in_channels * geom.in_h * geom.in_w;
    let mut cols = vec![0.0; p * pl];
    let mut out = vec![0.0; geom.batch * f * p];
    for n in 0..geom.batch {
        geom.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        // [f, pl] · [p, pl]^T -> [f, p], already in CHW order
        gemm(
            f,
            pl,
            p,
            kernel.data(),
            pl,
            false,
            &cols,
            pl,
            true,
            &mut out[n * f * p..(n + 1) * f * p],
        );
    }
    Tensor::new(geom.output_shape(), out)
}

/// Gradient of `<conv(x, kernel), grad>` with respect to `x`.
pub fn conv2d_grad_input(grad: &Tensor, kernel: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    check_shape(grad, geom.output_shape(), "conv2d_grad_input")?;
    check_shape(kernel, geom.kernel_shape(), "conv2d_grad_input")?;
    let (p, pl, f) = (geom.positions(), geom.patch_len(), geom.filters);
    let in_len = geom.in_channels * geom.in_h * geom.in_w;
    let mut cols = vec![0.0; p * pl];
    let mut out = vec![0.0; geom.batch * in_len];
    for n in 0..geom.batch {
        // [f, p]^T · [f, pl] -> [p, pl]
        gemm(
            p,
            f,
            pl,
            &grad.data()[n * f * p..(n + 1) * f * p],
            p,
            true,
            kernel.data(),
            pl,
            false,
            &mut cols,
        );
        geom.col2im(&cols, &mut out[n * in_len..(n + 1) * in_len]);
    }
    Tensor::new(geom.input_shape(), out)
}

/// Gradient of `<conv(input, k), grad>` with respect to `k`.
pub fn conv2d_grad_kernel(input: &Tensor, grad: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    check_shape(input, geom.input_shape(), "conv2d_grad_kernel")?;
    check_shape(grad, geom.output_shape(), "conv2d_grad_kernel")?;
    let (p, pl, f) = (geom.positions(), geom.patch_len(), geom.filters);
    let in_len = geom.in_channels * geom.in_h * geom.in_w;
    let mut cols = vec![0.0; p * pl];
    let mut acc = vec![0.0; f * pl];
    let mut part = vec![0.0; f * pl];
    for n in 0..geom.batch {
        geom.im2col(&input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        // [f, p] · [p, pl] -> [f, pl]
        gemm(
            f,
            p,
            pl,
            &grad.data()[n * f * p..(n + 1) * f * p],
            p,
            false,
            &cols,
            pl,
            false,
            &mut part,
        );
        acc.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
    Tensor::new(geom.kernel_shape(), acc)
}

/// Convolution layer: cross-correlation (no kernel flip) plus per-filter bias.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let geom = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if bias.len() != geom.filters {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: kernel.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    add_bias(&conv2d_raw(input, kernel, &geom)?, bias)
}

// ---------------------------------------------------------------------------
// Reductions

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    /// Index of the maximum, ties broken towards the lowest index.
    Argmax,
}

/// Reduces along `axis`, removing it from the shape. Argmax indices are returned as `f64`.
pub fn reduce(input: &Tensor, kind: ReduceKind, axis: usize) -> Result<Tensor> {
    let rank = input.rank();
    if axis >= rank {
        return Err(TensorError::Axis { axis, rank });
    }
    let extent = input.shape()[axis];
    if extent == 0 {
        return Err(TensorError::EmptyAxis);
    }
    let outer: usize = input.shape()[..axis].iter().product();
    let inner: usize = input.shape()[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| input.data()[(o * extent + j) * inner + i];
            let v = match kind {
                ReduceKind::Sum => (0..extent).map(at).sum(),
                ReduceKind::Max => (0..extent).map(at).fold(f64::NEG_INFINITY, f64::max),
                ReduceKind::Argmax => {
                    let mut best = 0;
                    for j in 1..extent {
                        if at(j) > at(best) {
                            best = j;
                        }
                    }
                    best as f64
                }
            };
            out.push(v);
        }
    }
    let mut shape = input.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

/// Per-row argmax of a matrix with lowest-index tie-breaking.
pub fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    Ok(reduce(x, ReduceKind::Argmax, x.rank() - 1)?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect())
}
