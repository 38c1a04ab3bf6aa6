use super::{Real, Result, Tensor, TensorError};

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.map(|v| v.max(T::zero())).ensure_finite("relu_forward")
}

/// Passes `grad_out` where `input > 0`. The subgradient at exactly zero is 0.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "relu_backward",
            dim: "grad_out length",
            expected: input.len(),
            actual: grad_out.len(),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)?.ensure_finite("relu_backward")
}
