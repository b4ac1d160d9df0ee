//! Weighted categorical cross-entropy with log-balanced class weights.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NetError;
use crate::imaging::LabelClass;

/// Per-class loss weights; log-balanced weighting is ln(N / N_c).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights(pub [f64; 4]);

impl ClassWeights {
    pub fn unit() -> ClassWeights {
        ClassWeights([1.0; 4])
    }

    pub fn get(&self, class: LabelClass) -> f64 {
        self.0[class.code() as usize]
    }
}

/// w_c = ln(N / N_c); zero when one class holds all samples, positive
/// otherwise. Zero counts are rejected because the weight is undefined.
pub fn class_weights(counts: [u64; 4]) -> Result<ClassWeights, NetError> {
    let total: u64 = counts.iter().sum();
    let mut w = [0.0f64; 4];
    for (class, (&count, slot)) in counts.iter().zip(w.iter_mut()).enumerate() {
        if count == 0 {
            return Err(NetError::ZeroClassCount { class });
        }
        *slot = (total as f64 / count as f64).ln();
    }
    Ok(ClassWeights(w))
}

/// Log-sum-exp stabilized softmax of each logit row, in f64.
pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Mean weighted negative log-likelihood over the batch, plus the exact
/// gradient with respect to the logits:
/// `dL/dlogit[i][c] = w[y_i]/N * (softmax_c - [c == y_i])`.
pub fn weighted_cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[LabelClass],
    weights: &ClassWeights,
) -> Result<(f64, Tensor<F>), NetError> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[1] != LabelClass::COUNT {
        return Err(NetError::ShapeMismatch {
            context: "cross-entropy logits".into(),
            expected: vec![labels.len(), LabelClass::COUNT],
            got: shape.to_vec(),
        });
    }
    let n = shape[0];
    if labels.len() != n {
        return Err(NetError::LabelCount {
            labels: labels.len(),
            rows: n,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::<F>::zeros(vec![n, LabelClass::COUNT]);
    for i in 0..n {
        let row: Vec<f64> = logits.data()[i * 4..(i + 1) * 4]
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let y = labels[i].code() as usize;
        let w = weights.0[y];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum_exp = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += w * (log_sum_exp - row[y]) * inv_n;
        let probs = softmax_row(&row);
        for c in 0..4 {
            let indicator = if c == y { 1.0 } else { 0.0 };
            grad.data_mut()[i * 4 + c] = F::from_f64(w * inv_n * (probs[c] - indicator));
        }
    }
    Ok((loss, grad))
}
