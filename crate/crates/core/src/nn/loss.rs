use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Row-wise softmax of `(N, n)` logits, evaluated in double precision.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect()
}

/// Mean multinomial logistic loss over the batch and its gradient with
/// respect to the logits, `(softmax - onehot) / N`.
pub fn loss_softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for ((row, &label), (probs, grow)) in logits
        .data()
        .chunks(classes)
        .zip(labels)
        .zip(softmax(logits).iter().zip(grad.data_mut().chunks_mut(classes)))
    {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        for (k, (g, &p)) in grow.iter_mut().zip(probs).enumerate() {
            let onehot = if k == label { 1.0 } else { 0.0 };
            *g = T::from_f64((p - onehot) / n as f64);
        }
    }
    Ok((loss / n as f64, grad))
}
