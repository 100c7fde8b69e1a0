use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Scalar};

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// the logits, `(softmax - onehot) / b`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &DenseTensor<S>, labels: &[usize]) -> Result<(f64, DenseTensor<S>)> {
    if logits.shape().len() != 2 || logits.outer() != labels.len() {
        return Err(Error::Shape(format!("logits {:?} for {} labels", logits.shape(), labels.len())));
    }
    let (b, classes) = (logits.outer(), logits.inner());
    if let Some((i, &c)) = labels.iter().enumerate().find(|(_, &c)| c >= classes) {
        return Err(Error::Parameter(format!("label {c} at position {i} outside [0, {classes})")));
    }
    let mut grad = vec![S::zero(); b * classes];
    let mut total = 0.0;
    for (n, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.data()[n * classes..(n + 1) * classes].iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label];
        for (c, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            let target = if c == label { 1.0 } else { 0.0 };
            grad[n * classes + c] = S::of_f64((p - target) / b as f64);
        }
    }
    Ok((total / b as f64, DenseTensor::from_vec(&[b, classes], grad)?))
}
