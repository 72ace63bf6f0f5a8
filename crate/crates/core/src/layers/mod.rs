//! Hand-written neural layers with explicit forward caches and backward passes.
//!
//! Each layer keeps a stack of forward caches: every `forward` call pushes one
//! entry and every `backward` call pops one, so backward calls must mirror
//! forward calls in reverse (LIFO) order. Parameter gradients accumulate
//! inside the layer across backward calls; [`take_grads`] drains them, adding
//! the L2 term `2·λ·w` exactly once per drain.
//!
//! [`take_grads`]: DenseLayer::take_grads

mod bilstm;
mod dense;
mod lstm;

pub use bilstm::{BiLstmLayer, BiLstmOutput};
pub use dense::DenseLayer;
pub use lstm::{LstmInputGrads, LstmLayer, LstmOutput};

use serde::{Deserialize, Serialize};

/// Pointwise nonlinearity applied after an affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative as a function of the pre-activation value.
    /// ReLU uses the subgradient 0 at exactly 0.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives_and_identity_passes_through() {
        assert_eq!(Activation::Relu.apply(3.0), 3.0);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Identity.apply(-1.0), -1.0);
        assert_eq!(Activation::Relu.derivative(-2.0), 0.0);
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(2.0), 1.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(800.0) <= 1.0);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
