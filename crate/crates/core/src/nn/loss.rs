use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::tensor::Tensor;

/// Floor applied to the probability inside the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    pub probs: Tensor<T>,
    /// `(probs - onehot) / B`.
    pub grad_logits: Tensor<T>,
}

pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<LossOutput<T>> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (batch, classes) = (logits.dim(0), logits.dim(1));
    if labels.len() != batch {
        return Err(Error::dim(
            "softmax_cross_entropy",
            "labels",
            batch,
            labels.len(),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = logits.clone();
    let mut grad = logits.clone();
    let inv_batch = T::one() / T::lift(batch as f64);
    let clamp = T::lift(LOG_CLAMP);
    let mut total = T::zero();
    for ((row, grow), &label) in probs
        .data_mut()
        .chunks_exact_mut(classes)
        .zip(grad.data_mut().chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
        total = total - row[label].max(clamp).ln();
        for (j, (g, &p)) in grow.iter_mut().zip(row.iter()).enumerate() {
            let target = if j == label { T::one() } else { T::zero() };
            *g = (p - target) * inv_batch;
        }
    }
    Ok(LossOutput {
        loss: total * inv_batch,
        probs,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits = Tensor::<f64>::full(vec![3, 10], 0.25);
        let out = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        assert!(out.probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-12));
    }

    #[test]
    fn saturated_correct_logit() {
        let mut logits = Tensor::<f32>::zeros(vec![1, 10]);
        logits.data_mut()[3] = 1e6;
        let out = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(out.loss.abs() < 1e-6);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn saturated_wrong_logit_is_clamped() {
        let mut logits = Tensor::<f32>::zeros(vec![1, 10]);
        logits.data_mut()[3] = 1e6;
        let out = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(out.loss.is_finite());
        assert!((out.loss as f64 - -(LOG_CLAMP.ln())).abs() < 1e-3);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::<f32>::zeros(vec![2, 4]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 4]),
            Err(Error::Validation(_))
        ));
    }
}
