//! Dense row-major tensors and the raw numeric kernels (matmul, 2-D
//! cross-correlation, max pooling) that every layer is built on.
//!
//! Storage and accumulation are both `f64`. Layout is row-major with the
//! last dimension fastest; 4-D tensors are `[batch, channels, height, width]`
//! and 2-D tensors are `[batch, features]`.

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a tensor. Every extent is at least 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Dimension("shape must have at least one dimension".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("shape {dims:?} has a zero extent")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Dimension(format!("shape {dims:?} overflows usize")))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("×"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let width = *self.dims().last().unwrap_or(&1);
        self.data.chunks(width)
    }

    /// Copies sample `index` of the leading (batch) axis into a batch of one.
    pub fn sample(&self, index: usize) -> Result<Tensor> {
        let dims = self.dims();
        if index >= dims[0] {
            return Err(Error::Dimension(format!(
                "sample {index} out of range for batch of {}",
                dims[0]
            )));
        }
        let per = self.numel() / dims[0];
        let mut new_dims = dims.to_vec();
        new_dims[0] = 1;
        Tensor::new(new_dims, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors along the leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.dims()[1..] != first.dims()[1..] {
                return Err(Error::Dimension(format!(
                    "cannot stack {} with {}",
                    p.shape, first.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims().to_vec();
        dims[0] = parts.iter().map(|p| p.dims()[0]).sum();
        Tensor::new(dims, data)
    }
}

/// `c = a·b` (or `c += a·b` when `accumulate`) on raw row-major buffers,
/// with optional transposition of either operand expressed through strides.
///
/// `a` is logically `m×k`, `b` is `k×n`, `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices are exactly m*k, k*n and m*n elements long (checked
    // above in debug builds and by every caller's shape validation), and the
    // strides describe in-bounds row-major views of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
        return Err(Error::Dimension(format!(
            "matmul of {} by {}: inner dimensions must agree",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (ad[0], ad[1], bd[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new([m, n], out)
}

/// Geometry of one 2-D convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if input[1] != kernel[1] {
            return Err(Error::Dimension(format!(
                "conv2d input {input:?} has {} channels but kernel {kernel:?} expects {}",
                input[1], kernel[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{} (input {input:?}, padding {padding})",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            batch: input[0],
            in_channels: input[1],
            height: h,
            width: w,
            out_channels: kernel[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Rows of the unfolded patch matrix: `Cin·kh·kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the unfolded patch matrix: `H'·W'`.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Multiply-accumulates for the whole batch.
    pub fn macs(&self) -> u64 {
        (self.batch * self.out_channels * self.positions() * self.patch_len()) as u64
    }

    /// Input coordinate hit by output `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one sample `[Cin,H,W]` into a `[Cin·kh·kw, H'·W']` patch matrix.
pub(crate) fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let positions = g.positions();
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &sample[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => chan[y * g.width + x],
                            None => 0.0,
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch-matrix gradient back onto `[Cin,H,W]`.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let positions = g.positions();
    let plane = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut sample[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            chan[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_bias(bias: &Tensor, out_channels: usize) -> Result<()> {
    if bias.dims() != [out_channels] {
        return Err(Error::Dimension(format!(
            "conv2d bias {} does not match {out_channels} output channels",
            bias.shape()
        )));
    }
    Ok(())
}

/// 2-D cross-correlation (no kernel flip) plus per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    check_bias(bias, g.out_channels)?;
    let (k, p) = (g.patch_len(), g.positions());
    let in_per = g.in_channels * g.height * g.width;
    let out_per = g.out_channels * p;
    let mut out = vec![0.0; g.batch * out_per];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * in_per..(n + 1) * in_per], &mut cols);
        let dst = &mut out[n * out_per..(n + 1) * out_per];
        for (c, chunk) in dst.chunks_mut(p).enumerate() {
            chunk.fill(bias.data()[c]);
        }
        gemm(g.out_channels, k, p, kernel.data(), false, &cols, false, dst, true);
    }
    Tensor::new(g.output_dims(), out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::new(input.dims(), kernel.dims(), stride, padding)?;
    if grad_out.dims() != g.output_dims() {
        return Err(Error::Dimension(format!(
            "conv2d backward: grad {} does not match output {:?}",
            grad_out.shape(),
            g.output_dims()
        )));
    }
    let (k, p) = (g.patch_len(), g.positions());
    let in_per = g.in_channels * g.height * g.width;
    let out_per = g.out_channels * p;
    let mut d_input = vec![0.0; input.numel()];
    let mut d_kernel = vec![0.0; kernel.numel()];
    let mut d_bias = vec![0.0; g.out_channels];
    let mut cols = vec![0.0; k * p];
    let mut d_cols = vec![0.0; k * p];
    for n in 0..g.batch {
        let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
        im2col(&g, &input.data()[n * in_per..(n + 1) * in_per], &mut cols);
        // dK[Cout,K] += dOut[Cout,P] · colsᵀ[P,K]
        gemm(g.out_channels, p, k, go, false, &cols, true, &mut d_kernel, true);
        // dCols[K,P] = Kᵀ[K,Cout] · dOut[Cout,P]
        gemm(k, g.out_channels, p, kernel.data(), true, go, false, &mut d_cols, false);
        col2im(&g, &d_cols, &mut d_input[n * in_per..(n + 1) * in_per]);
        for (c, chunk) in go.chunks(p).enumerate() {
            d_bias[c] += chunk.iter().sum::<f64>();
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::new(input.dims().to_vec(), d_input)?,
        kernel: Tensor::new(kernel.dims().to_vec(), d_kernel)?,
        bias: Tensor::new([g.out_channels], d_bias)?,
    })
}

/// Output spatial extents of a max pool, validating the window.
pub fn pool_output_dims(input: &[usize], window: usize, stride: usize) -> Result<[usize; 4]> {
    if input.len() != 4 {
        return Err(Error::Dimension(format!(
            "maxpool2d expects a 4-D input, got {input:?}"
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Dimension("maxpool2d window and stride must be positive".into()));
    }
    if window > input[2] || window > input[3] {
        return Err(Error::Dimension(format!(
            "maxpool2d window {window} exceeds spatial extent {}×{}",
            input[2], input[3]
        )));
    }
    Ok([
        input[0],
        input[1],
        (input[2] - window) / stride + 1,
        (input[3] - window) / stride + 1,
    ])
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output cell, the flat index into `input` of the winning element. Ties go
/// to the lowest flat index.
pub fn maxpool2d(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let out_dims = pool_output_dims(input.dims(), window, stride)?;
    let [n, c, oh, ow] = out_dims;
    let (h, w) = (input.dims()[2], input.dims()[3]);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = src[best_idx];
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for (kx, &v) in src[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(out_dims, out)?, argmax))
}

/// Routes each output gradient to the input element that won its window.
pub fn maxpool2d_backward(input_dims: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::Dimension(format!(
            "maxpool2d backward: {} indices for gradient {}",
            argmax.len(),
            grad_out.shape()
        )));
    }
    let mut grad = Tensor::zeros(input_dims.to_vec())?;
    let dst = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dst[idx] += g;
    }
    Ok(grad)
}
