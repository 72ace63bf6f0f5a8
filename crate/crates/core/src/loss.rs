//! Mean-squared-error loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// MSE over all elements: `loss = mean((pred − truth)²)`,
/// `grad = 2·(pred − truth)/count` with respect to `pred`.
pub fn mse_loss(pred: &Tensor, truth: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            context: "mse_loss",
            expected: truth.shape().to_vec(),
            got: pred.shape().to_vec(),
        });
    }
    let count = pred.len() as f64;
    if count == 0.0 {
        return Err(Error::InvalidConfig("mse_loss over empty tensors".into()));
    }
    let mut loss = 0.0;
    let grad_data: Vec<f64> = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / count
        })
        .collect();
    loss /= count;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mse_loss"));
    }
    Ok((loss, Tensor::from_vec(pred.shape(), grad_data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn equal_tensors_give_zero_loss_and_grad() {
        let p = Tensor::vector(&[1.0, -2.0, 3.5]);
        let (loss, grad) = mse_loss(&p, &p).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_element_hand_case() {
        let pred = Tensor::vector(&[1.0, 3.0]);
        let truth = Tensor::vector(&[1.0, 1.0]);
        let (loss, grad) = mse_loss(&pred, &truth).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grad.data(), &[0.0, 2.0]);
    }

    #[test]
    fn random_pair_matches_brute_force_sum() {
        let mut rng = seeded_rng(5, "loss.bruteforce");
        let pred = Tensor::glorot_uniform(3, 4, &mut rng);
        let truth = Tensor::glorot_uniform(3, 4, &mut rng);
        let (loss, grad) = mse_loss(&pred, &truth).unwrap();

        let mut acc = 0.0;
        for (p, t) in pred.data().iter().zip(truth.data()) {
            acc += (p - t) * (p - t);
        }
        acc /= 12.0;
        assert!((loss - acc).abs() < 1e-15);
        for ((p, t), g) in pred.data().iter().zip(truth.data()).zip(grad.data()) {
            assert!((g - 2.0 * (p - t) / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::vector(&[1.0]);
        let b = Tensor::vector(&[1.0, 2.0]);
        assert!(mse_loss(&a, &b).is_err());
    }
}
