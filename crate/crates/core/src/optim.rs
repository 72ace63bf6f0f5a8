//! Adam optimizer and L2 regularization spec.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// L2 (ridge) penalty strength. The penalty adds `λ·Σw²` to the loss, so its
/// gradient contribution is exactly `2·λ·w`; layers fold that term into their
/// drained kernel gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Spec {
    lambda: f64,
}

impl L2Spec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "L2 lambda must be finite and non-negative, got {lambda}"
            )));
        }
        Ok(L2Spec { lambda })
    }

    pub fn none() -> Self {
        L2Spec { lambda: 0.0 }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Penalty value for one parameter tensor: `λ·Σw²`.
    pub fn penalty(&self, w: &Tensor) -> f64 {
        self.lambda * w.squared_norm()
    }
}

#[derive(Debug, Clone)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Adam with bias correction. Moments are kept per parameter name; all
/// parameters updated between two `begin_step` calls share one time step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    /// Standard constants: β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Open a new optimizer step; must precede the `update` calls of a step.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Apply one bias-corrected Adam update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                context: "AdamState::update",
                expected: param.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        if self.step_count == 0 {
            return Err(Error::Protocol(
                "AdamState::update called before begin_step".into(),
            ));
        }
        let entry = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
            first: Tensor::zeros(param.shape()),
            second: Tensor::zeros(param.shape()),
        });
        if entry.first.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                context: "AdamState::update(moments)",
                expected: entry.first.shape().to_vec(),
                got: param.shape().to_vec(),
            });
        }
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), (v, &g)) in param
            .data_mut()
            .iter_mut()
            .zip(entry.first.data_mut())
            .zip(entry.second.data_mut().iter_mut().zip(grad.data()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bias1;
            let v_hat = *v / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        param.ensure_finite("AdamState::update")?;
        Ok(())
    }
}
