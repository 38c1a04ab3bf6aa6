//! Fully connected affine layer, `y = W·x + b`.
//!
//! Rank-1 and rank-3 inputs are single examples; rank-2 and rank-4 inputs
//! carry a leading batch extent. Each example is flattened.

use super::{all_finite, matmul, Real, Result, Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct DenseGrads<T: Real = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub biases: Tensor<T>,
}

fn batch_of<T: Real>(input: &Tensor<T>) -> usize {
    match input.rank() {
        2 | 4 => input.shape()[0],
        _ => 1,
    }
}

fn check<T: Real>(op: &'static str, input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if weights.rank() != 2 {
        return Err(TensorError::Rank {
            op,
            expected: "2 (weights)",
            actual: weights.rank(),
        });
    }
    let (outputs, inputs) = (weights.shape()[0], weights.shape()[1]);
    let n = batch_of(input);
    let per_example = input.len() / n;
    if per_example != inputs {
        return Err(TensorError::ShapeMismatch {
            op,
            dim: "flattened input length",
            expected: inputs,
            actual: per_example,
        });
    }
    Ok((n, inputs, outputs))
}

pub fn fc_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, biases: &Tensor<T>) -> Result<Tensor<T>> {
    const OP: &str = "fc_forward";
    let (n, inputs, outputs) = check(OP, input, weights)?;
    if biases.len() != outputs {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "bias length",
            expected: outputs,
            actual: biases.len(),
        });
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| biases.data().iter().copied()).collect();
    // Y (N×O) += X (N×I) · Wᵀ (I×O)
    matmul(n, inputs, outputs, input.data(), false, weights.data(), true, &mut out, true);
    all_finite(&out, OP)?;
    let shape = if matches!(input.rank(), 2 | 4) {
        vec![n, outputs]
    } else {
        vec![outputs]
    };
    Tensor::new(&shape, out)
}

pub fn fc_backward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    const OP: &str = "fc_backward";
    let (n, inputs, outputs) = check(OP, input, weights)?;
    if grad_out.len() != n * outputs {
        return Err(TensorError::ShapeMismatch {
            op: OP,
            dim: "grad_out length",
            expected: n * outputs,
            actual: grad_out.len(),
        });
    }
    let mut grad_weights = vec![T::zero(); outputs * inputs];
    // dW (O×I) = dYᵀ (O×N) · X (N×I)
    matmul(outputs, n, inputs, grad_out.data(), true, input.data(), false, &mut grad_weights, false);
    let mut grad_input = vec![T::zero(); n * inputs];
    // dX (N×I) = dY (N×O) · W (O×I)
    matmul(n, outputs, inputs, grad_out.data(), false, weights.data(), false, &mut grad_input, false);
    let mut grad_biases = vec![T::zero(); outputs];
    for row in grad_out.data().chunks_exact(outputs) {
        for (b, &g) in grad_biases.iter_mut().zip(row) {
            *b += g;
        }
    }
    all_finite(&grad_weights, OP)?;
    all_finite(&grad_input, OP)?;
    all_finite(&grad_biases, OP)?;
    Ok(DenseGrads {
        input: Tensor::new(input.shape(), grad_input)?,
        weights: Tensor::new(weights.shape(), grad_weights)?,
        biases: Tensor::new(&[outputs], grad_biases)?,
    })
}
