//! 2-D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use super::{all_finite, image_dims, matmul, Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((extent + 2·padding − kernel) / stride) + 1`, or an error when
    /// that is below one.
    pub fn output_extent(&self, extent: usize) -> Result<usize> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(TensorError::InvalidSpec {
                op: "conv2d",
                reason: format!("channels, kernel and stride must be positive: {self:?}"),
            });
        }
        let padded = extent + 2 * self.padding;
        if padded < self.kernel {
            return Err(TensorError::InvalidSpec {
                op: "conv2d",
                reason: format!(
                    "kernel {} exceeds padded input extent {padded}",
                    self.kernel
                ),
            });
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

/// Unrolls receptive fields into a (C·k·k) × (OH·OW) matrix.
fn im2col<T: Real>(input: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, col: &mut Vec<T>) {
    let k = spec.kernel;
    let p = spec.padding as isize;
    let s = spec.stride;
    let cols = oh * ow;
    col.clear();
    col.resize(spec.patch_len() * cols, T::zero());
    for c in 0..spec.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters column gradients back onto the input plane (adjoint of im2col).
fn col2im<T: Real>(col: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, grad: &mut [T]) {
    let k = spec.kernel;
    let p = spec.padding as isize;
    let s = spec.stride;
    let cols = oh * ow;
    grad.fill(T::zero());
    for c in 0..spec.in_channels {
        let plane = &mut grad[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Single-example forward on raw slices. `out` must hold
/// out_channels × oh × ow values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_single<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    weights: &[T],
    biases: &[T],
    spec: &ConvSpec,
    out: &mut [T],
    col: &mut Vec<T>,
) {
    let oh = spec.output_extent(h).expect("validated spec");
    let ow = spec.output_extent(w).expect("validated spec");
    let cols = oh * ow;
    im2col(input, h, w, spec, oh, ow, col);
    for (k, chunk) in out.chunks_exact_mut(cols).enumerate() {
        chunk.fill(biases[k]);
    }
    matmul(spec.out_channels, spec.patch_len(), cols, weights, false, col, false, out, true);
}

/// Single-example backward. Weight and bias gradients are accumulated into
/// `grad_weights`/`grad_biases`; `grad_input` is overwritten when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_single<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    weights: &[T],
    grad_out: &[T],
    spec: &ConvSpec,
    grad_input: Option<&mut [T]>,
    grad_weights: &mut [T],
    grad_biases: &mut [T],
    col: &mut Vec<T>,
) {
    let oh = spec.output_extent(h).expect("validated spec");
    let ow = spec.output_extent(w).expect("validated spec");
    let cols = oh * ow;
    let patch = spec.patch_len();
    im2col(input, h, w, spec, oh, ow, col);
    // dW += dY (K×P) · colᵀ (P×CKK)
    matmul(spec.out_channels, cols, patch, grad_out, false, col, true, grad_weights, true);
    for (k, chunk) in grad_out.chunks_exact(cols).enumerate() {
        grad_biases[k] += chunk.iter().copied().sum::<T>();
    }
    if let Some(grad_input) = grad_input {
        // dcol = Wᵀ (CKK×K) · dY (K×P)
        matmul(patch, spec.out_channels, cols, weights, true, grad_out, false, col, false);
        col2im(col, h, w, spec, oh, ow, grad_input);
    }
}

struct Checked {
    batch: Option<usize>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check_conv<T: Real>(op: &'static str, input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec) -> Result<Checked> {
    let (batch, c, h, w) = image_dims(op, input.shape())?;
    let oh = spec.output_extent(h)?;
    let ow = spec.output_extent(w)?;
    if c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op,
            dim: "input channels",
            expected: spec.in_channels,
            actual: c,
        });
    }
    let ws = weights.shape();
    if ws.len() != 4 {
        return Err(TensorError::Rank {
            op,
            expected: "4 (weights)",
            actual: ws.len(),
        });
    }
    let want = spec.weight_shape();
    for (i, dim) in ["weight out channels", "weight in channels", "kernel height", "kernel width"]
        .into_iter()
        .enumerate()
    {
        if ws[i] != want[i] {
            return Err(TensorError::ShapeMismatch {
                op,
                dim,
                expected: want[i],
                actual: ws[i],
            });
        }
    }
    Ok(Checked { batch, h, w, oh, ow })
}

fn out_shape(batch: Option<usize>, c: usize, h: usize, w: usize) -> Vec<usize> {
    match batch {
        Some(n) => vec![n, c, h, w],
        None => vec![c, h, w],
    }
}

/// Cross-correlates each filter with the input and adds its bias.
///
/// Accepts a single C×H×W example or an N×C×H×W batch.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    biases: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_forward";
    let dims = check_conv(OP, input, weights, spec)?;
    if biases.len() != spec.out_channels {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "bias length",
            expected: spec.out_channels,
            actual: biases.len(),
        });
    }
    let n = dims.batch.unwrap_or(1);
    let in_len = input.len() / n;
    let out_len = spec.out_channels * dims.oh * dims.ow;
    let mut out = vec![T::zero(); n * out_len];
    let mut col = Vec::new();
    for (x, y) in input.data().chunks_exact(in_len).zip(out.chunks_exact_mut(out_len)) {
        conv_forward_single(x, dims.h, dims.w, weights.data(), biases.data(), spec, y, &mut col);
    }
    all_finite(&out, OP)?;
    Tensor::new(&out_shape(dims.batch, spec.out_channels, dims.oh, dims.ow), out)
}

/// Exact gradients of [`conv2d_forward`]. For batched input the weight and
/// bias gradients are summed over the batch in index order.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    let dims = check_conv(OP, input, weights, spec)?;
    let want = out_shape(dims.batch, spec.out_channels, dims.oh, dims.ow);
    if grad_out.shape() != want.as_slice() {
        let (dim, expected, actual) = if grad_out.rank() != want.len() {
            ("grad_out rank", want.len(), grad_out.rank())
        } else {
            let i = (0..want.len()).find(|&i| grad_out.shape()[i] != want[i]).unwrap_or(0);
            (["grad_out extent 0", "grad_out extent 1", "grad_out extent 2", "grad_out extent 3"][i], want[i], grad_out.shape()[i])
        };
        return Err(TensorError::ShapeMismatch { op: OP, dim, expected, actual });
    }
    let n = dims.batch.unwrap_or(1);
    let in_len = input.len() / n;
    let out_len = grad_out.len() / n;
    let mut grad_input = vec![T::zero(); input.len()];
    let mut grad_weights = vec![T::zero(); weights.len()];
    let mut grad_biases = vec![T::zero(); spec.out_channels];
    let mut col = Vec::new();
    for ((x, dy), dx) in input
        .data()
        .chunks_exact(in_len)
        .zip(grad_out.data().chunks_exact(out_len))
        .zip(grad_input.chunks_exact_mut(in_len))
    {
        conv_backward_single(
            x,
            dims.h,
            dims.w,
            weights.data(),
            dy,
            spec,
            Some(dx),
            &mut grad_weights,
            &mut grad_biases,
            &mut col,
        );
    }
    all_finite(&grad_input, OP)?;
    all_finite(&grad_weights, OP)?;
    all_finite(&grad_biases, OP)?;
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        weights: Tensor::new(weights.shape(), grad_weights)?,
        biases: Tensor::new(&[spec.out_channels], grad_biases)?,
    })
}
