//! Softmax cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean of `-log softmax(logits)[label]` over the batch. Logits are
/// `[batch, classes]`; the sum runs in f64 with the max-subtraction trick.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, classes) = check_logits(logits, labels)?;
    let mut total = 0.0f64;
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        total -= log_softmax_at(row, labels[b]);
    }
    Ok(total / batch as f64)
}

/// Gradient of [`cross_entropy_loss`] wrt the logits:
/// `(softmax - onehot) / batch`.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, classes) = check_logits(logits, labels)?;
    let mut grad = Tensor::zeros(&[batch, classes]);
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, |m, v| m.max(v as f64));
        let mut denom = 0.0f64;
        for v in row {
            denom += (*v as f64 - max).exp();
        }
        let grow = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (i, v) in row.iter().enumerate() {
            let p = (*v as f64 - max).exp() / denom;
            let onehot = if i == labels[b] { 1.0 } else { 0.0 };
            grow[i] = ((p - onehot) / batch as f64) as f32;
        }
    }
    Ok(grad)
}

fn log_softmax_at(row: &[f32], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, |m, v| m.max(v as f64));
    let mut denom = 0.0f64;
    for v in row {
        denom += (*v as f64 - max).exp();
    }
    (row[label] as f64 - max) - denom.ln()
}

fn check_logits(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: "[batch, classes] logits".into(),
            actual: format!("{:?}", logits.shape()),
        });
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if batch == 0 || batch != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{batch} labels for a non-empty batch"),
            actual: format!("{} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    Ok((batch, classes))
}

/// Fraction of rows whose argmax equals the label. Ties resolve to the
/// lowest index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (batch, classes) = check_logits(logits, labels)?;
    let mut hits = 0usize;
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        if best == labels[b] {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch as f64)
}
