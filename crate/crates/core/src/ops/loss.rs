//! Classification and segmentation losses and the Dice metric.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean over the batch of `-log softmax(logits)[label]`.
///
/// `logits` holds `classes` values per sample. Returns the loss and
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    let k = s.sample();
    if labels.len() != s.n {
        return Err(Error::data(format!(
            "{} labels for a batch of {}",
            labels.len(),
            s.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::from_f64(1.0 / s.n as f64);
    let mut grad = Tensor::zeros(s);
    let mut loss = T::ZERO;
    for ((row, g), &label) in logits
        .data()
        .chunks(k)
        .zip(grad.data_mut().chunks_mut(k))
        .zip(labels)
    {
        let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
        let mut z = T::ZERO;
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - max).exp();
            z += *gv;
        }
        loss += z.ln() - (row[label] - max);
        for gv in g.iter_mut() {
            *gv = *gv / z * inv_n;
        }
        g[label] -= inv_n;
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy is not finite".into()));
    }
    Ok((loss, grad))
}

/// `2|A ∩ B| / (|A| + |B|)`, or 1 when both masks are empty.
pub fn dice(pred: &[bool], truth: &[bool]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "dice masks differ in length");
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        inter += (p && t) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        (2 * inter) as f64 / (a + b) as f64
    }
}

/// Dice between two tensors binarized at 0.5.
pub fn dice_tensors<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    pred.check_same_shape(truth)?;
    let half = T::from_f64(0.5);
    let p: Vec<bool> = pred.data().iter().map(|&v| v > half).collect();
    let t: Vec<bool> = truth.data().iter().map(|&v| v > half).collect();
    Ok(dice(&p, &t))
}

pub const SOFT_DICE_SMOOTHING: f64 = 1.0;

/// `1 - (2 Σ p q + s) / (Σ p + Σ q + s)` with `s = 1`, and its gradient in `p`.
pub fn soft_dice_loss<T: Scalar>(pred_prob: &Tensor<T>, truth: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred_prob.check_same_shape(truth)?;
    let s = T::from_f64(SOFT_DICE_SMOOTHING);
    let two = T::from_f64(2.0);
    let mut inter = T::ZERO;
    let mut sp = T::ZERO;
    let mut sq = T::ZERO;
    for (&p, &q) in pred_prob.data().iter().zip(truth.data()) {
        inter += p * q;
        sp += p;
        sq += q;
    }
    let num = two * inter + s;
    let den = sp + sq + s;
    let loss = T::ONE - num / den;
    let den2 = den * den;
    let grad = Tensor::from_vec(
        pred_prob.shape(),
        truth
            .data()
            .iter()
            .map(|&q| -(two * q * den - num) / den2)
            .collect(),
    )?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(Shape::new(3, 10, 1, 1));
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_gives_zero_loss() {
        let mut logits = Tensor::<f64>::zeros(Shape::new(1, 4, 1, 1));
        logits.data_mut()[2] = 1e4;
        let (loss, grad) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::<f32>::zeros(Shape::new(1, 3, 1, 1));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn dice_cases() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]), 0.0);
        assert_eq!(dice(&[false; 4], &[false; 4]), 1.0);
        // half of an even-sized true mask, no false positives
        let truth = [true, true, true, true, false, false];
        let pred = [true, true, false, false, false, false];
        assert_eq!(dice(&pred, &truth), 2.0 / 3.0);
    }

    #[test]
    fn soft_dice_extremes() {
        let q = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |i| (i % 3 == 0) as u8 as f64);
        let (loss, _) = soft_dice_loss(&q, &q).unwrap();
        assert!(loss.abs() < 1e-12);
        let inv = q.map(|v| 1.0 - v);
        let (loss, _) = soft_dice_loss(&inv, &q).unwrap();
        assert!(loss > 0.9, "loss {loss}");
    }
}
