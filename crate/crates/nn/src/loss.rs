//! Softmax cross-entropy.

use crate::tensor::Tensor;
use crate::NnError;

/// Row-wise softmax of a `[N, K]` logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.item_len();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k.max(1)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Per-sample cross-entropy losses and the gradient of their *sum* w.r.t. the
/// logits (`softmax - onehot` per row).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f32>, Tensor), NnError> {
    let n = logits.batch();
    let k = logits.item_len();
    if labels.len() != n {
        return Err(NnError::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(NnError::Shape(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = softmax_rows(logits);
    let mut losses = Vec::with_capacity(n);
    for ((row, g), &y) in logits.data().chunks_exact(k).zip(grad.data_mut().chunks_exact_mut(k)).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        losses.push(lse - row[y]);
        g[y] -= 1.0;
    }
    Ok((losses, grad))
}

/// Losses only.
pub fn cross_entropy_losses(logits: &Tensor, labels: &[usize]) -> Result<Vec<f32>, NnError> {
    cross_entropy(logits, labels).map(|(l, _)| l)
}

/// Index of the largest logit per row (first wins on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.item_len().max(1);
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
