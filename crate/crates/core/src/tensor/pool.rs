//! Non-overlapping 2×2 max pooling.
//!
//! Ties go to the first element in row-major window order.

use super::{all_finite, image_dims, Real, Result, Tensor, TensorError};

/// Winning input position (flat index into the pooled tensor) per output
/// element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxMask {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    indices: Vec<u32>,
}

impl ArgmaxMask {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }
}

/// Pools one C×H×W example; `indices` receive offsets relative to `input`.
pub(crate) fn pool_forward_single<T: Real>(
    input: &[T],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [T],
    indices: &mut [u32],
) {
    let (oh, ow) = (h / 2, w / 2);
    let mut o = 0;
    for c in 0..channels {
        let base = c * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if input[cand] > input[best] {
                        best = cand;
                    }
                }
                out[o] = input[best];
                indices[o] = best as u32;
                o += 1;
            }
        }
    }
}

pub(crate) fn pool_backward_single<T: Real>(indices: &[u32], grad_out: &[T], grad_input: &mut [T]) {
    grad_input.fill(T::zero());
    for (&i, &g) in indices.iter().zip(grad_out) {
        grad_input[i as usize] += g;
    }
}

pub fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, ArgmaxMask)> {
    const OP: &str = "maxpool2_forward";
    let (batch, c, h, w) = image_dims(OP, input.shape())?;
    if h % 2 != 0 {
        return Err(TensorError::OddExtent { op: OP, dim: "height", extent: h });
    }
    if w % 2 != 0 {
        return Err(TensorError::OddExtent { op: OP, dim: "width", extent: w });
    }
    let n = batch.unwrap_or(1);
    let in_len = c * h * w;
    let out_len = in_len / 4;
    let mut out = vec![T::zero(); n * out_len];
    let mut indices = vec![0u32; n * out_len];
    for (i, x) in input.data().chunks_exact(in_len).enumerate() {
        let range = i * out_len..(i + 1) * out_len;
        pool_forward_single(x, c, h, w, &mut out[range.clone()], &mut indices[range.clone()]);
        for idx in &mut indices[range] {
            *idx += (i * in_len) as u32;
        }
    }
    all_finite(&out, OP)?;
    let output_shape = match batch {
        Some(n) => vec![n, c, h / 2, w / 2],
        None => vec![c, h / 2, w / 2],
    };
    let mask = ArgmaxMask {
        input_shape: input.shape().to_vec(),
        output_shape: output_shape.clone(),
        indices,
    };
    Ok((Tensor::new(&output_shape, out)?, mask))
}

/// Routes each output gradient to its window's argmax; zero elsewhere.
pub fn maxpool2_backward<T: Real>(mask: &ArgmaxMask, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "maxpool2_backward";
    if grad_out.shape() != mask.output_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "grad_out length",
            expected: mask.indices.len(),
            actual: grad_out.len(),
        });
    }
    let mut grad = vec![T::zero(); mask.input_shape.iter().product()];
    pool_backward_single(&mask.indices, grad_out.data(), &mut grad);
    all_finite(&grad, OP)?;
    Tensor::new(&mask.input_shape, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_checkpoint_shape() {
        let x = Tensor::<f32>::from_fn(&[32, 32, 32], |i| (i % 13) as f32).unwrap();
        let (y, mask) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[32, 16, 16]);
        assert_eq!(mask.output_shape(), &[32, 16, 16]);
    }

    #[test]
    fn picks_window_maximum() {
        let x = Tensor::<f32>::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, mask) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(mask.indices(), &[3]);
    }

    #[test]
    fn ties_take_first_row_major_index() {
        let x = Tensor::<f32>::full(&[2, 4, 4], 0.25).unwrap();
        let (y, mask) = maxpool2_forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
        // Top-left of every window.
        let want: Vec<u32> = (0..2u32)
            .flat_map(|c| (0..2u32).flat_map(move |oy| (0..2u32).map(move |ox| c * 16 + oy * 8 + ox * 2)))
            .collect();
        assert_eq!(mask.indices(), want.as_slice());
    }

    #[test]
    fn odd_extent_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4]).unwrap();
        assert!(matches!(
            maxpool2_forward(&x),
            Err(TensorError::OddExtent { dim: "height", extent: 3, .. })
        ));
        let x = Tensor::<f32>::zeros(&[2, 1, 4, 5]).unwrap();
        assert!(matches!(
            maxpool2_forward(&x),
            Err(TensorError::OddExtent { dim: "width", .. })
        ));
    }

    #[test]
    fn increasing_input_routes_one_per_window() {
        let x = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32).unwrap();
        let (y, mask) = maxpool2_forward(&x).unwrap();
        let g = maxpool2_backward(&mask, &Tensor::full(y.shape(), 1.0f32).unwrap()).unwrap();
        // Bottom-right of every window wins.
        let want = [
            0., 0., 0., 0., //
            0., 1., 0., 1., //
            0., 0., 0., 0., //
            0., 1., 0., 1.,
        ];
        assert_eq!(g.data(), &want);
    }

    #[test]
    fn batched_indices_are_global() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 2, 2], |i| -(i as f32)).unwrap();
        let (_, mask) = maxpool2_forward(&x).unwrap();
        assert_eq!(mask.indices(), &[0, 4]);
    }

    #[test]
    fn mismatched_grad_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 4, 4]).unwrap();
        let (_, mask) = maxpool2_forward(&x).unwrap();
        let g = Tensor::<f32>::zeros(&[1, 2, 3]).unwrap();
        assert!(maxpool2_backward(&mask, &g).is_err());
    }
}
