use super::{Real, Result, Tensor, TensorError};

/// Loss, posterior and logit gradient of one softmax cross-entropy term.
#[derive(Debug, Clone)]
pub struct SoftmaxXent<T: Real = f32> {
    pub loss: T,
    pub probs: Tensor<T>,
    pub grad_logits: Tensor<T>,
}

/// Numerically stable softmax (max-subtracted) of a logit slice.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn xent_slice<T: Real>(logits: &[T], label: usize) -> Result<(T, Vec<T>, Vec<T>)> {
    if label >= logits.len() {
        return Err(TensorError::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_total = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    let loss = -(logits[label] - max - log_total);
    let probs = softmax(logits);
    let mut grad = probs.clone();
    grad[label] -= T::one();
    if !loss.is_finite() || probs.iter().any(|p| !p.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax_xent" });
    }
    Ok((loss, probs, grad))
}

/// `−log softmax(logits)[label]` with its gradient `probs − onehot(label)`.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, label: usize) -> Result<SoftmaxXent<T>> {
    let (loss, probs, grad) = xent_slice(logits.data(), label)?;
    Ok(SoftmaxXent {
        loss,
        probs: Tensor::new(logits.shape(), probs)?,
        grad_logits: Tensor::new(logits.shape(), grad)?,
    })
}

/// Mean cross-entropy over an N×K batch; the gradient is scaled by 1/N.
pub fn softmax_xent_batch<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxXent<T>> {
    if logits.rank() != 2 {
        return Err(TensorError::Rank {
            op: "softmax_xent_batch",
            expected: "2",
            actual: logits.rank(),
        });
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_xent_batch",
            dim: "label count",
            expected: n,
            actual: labels.len(),
        });
    }
    let scale = T::one() / T::from_usize(n).expect("batch size fits");
    let mut total = T::zero();
    let mut probs = Vec::with_capacity(n * k);
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let (l, p, g) = xent_slice(row, label)?;
        total += l;
        probs.extend(p);
        grad.extend(g.into_iter().map(|v| v * scale));
    }
    Ok(SoftmaxXent {
        loss: total * scale,
        probs: Tensor::new(logits.shape(), probs)?,
        grad_logits: Tensor::new(logits.shape(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_logits() {
        let z = Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap();
        let out = softmax_xent(&z, 1).unwrap();
        assert_eq!(out.probs.data(), &[0.5, 0.5]);
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.grad_logits.data(), &[0.5, -0.5]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let z = Tensor::<f32>::new(&[2], vec![1000.0, 0.0]).unwrap();
        let out = softmax_xent(&z, 0).unwrap();
        assert!(out.loss.abs() < 1e-6);
        assert!(out.probs.is_finite());
        let wrong = softmax_xent(&z, 1).unwrap();
        assert!((wrong.loss - 1000.0).abs() < 1e-3);
    }

    #[test]
    fn invalid_label() {
        let z = Tensor::<f32>::new(&[2], vec![0.0, 1.0]).unwrap();
        assert_eq!(
            softmax_xent(&z, 2).unwrap_err(),
            TensorError::InvalidLabel { label: 2, classes: 2 }
        );
    }

    #[test]
    fn batch_mean() {
        let z = Tensor::<f64>::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = softmax_xent_batch(&z, &[0, 1]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.grad_logits.data(), &[-0.25, 0.25, 0.25, -0.25]);
    }
}
