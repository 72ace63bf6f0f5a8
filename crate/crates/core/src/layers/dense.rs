//! Fully connected layer: `y = act(x·W + b)`.

use super::Activation;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
struct DenseCache {
    input: Tensor, // [batch, in]
    pre: Tensor,   // [batch, out], pre-activation
}

/// Dense (fully connected) layer with an optional ReLU.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor, // [in, out]
    pub bias: Tensor,    // [out]
    pub activation: Activation,
    #[serde(skip)]
    grad_weights: Option<Tensor>,
    #[serde(skip)]
    grad_bias: Option<Tensor>,
    #[serde(skip)]
    cache: Vec<DenseCache>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        DenseLayer {
            weights: Tensor::glorot_uniform(input_dim, output_dim, rng),
            bias: Tensor::zeros(&[output_dim]),
            activation,
            grad_weights: None,
            grad_bias: None,
            cache: Vec::new(),
        }
    }

    /// Build from explicit parameters (tests, checkpoint restore).
    pub fn from_parts(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || bias.len() != weights.cols() {
            return Err(Error::ShapeMismatch {
                context: "DenseLayer::from_parts",
                expected: vec![weights.cols()],
                got: vec![bias.len()],
            });
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
            grad_weights: None,
            grad_bias: None,
            cache: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Forward pass over a `[batch, in]` tensor; caches for backward.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_inference(x)?;
        let pre = x.matmul(&self.weights)?.add_row_broadcast(&self.bias)?;
        self.cache.push(DenseCache {
            input: x.clone(),
            pre,
        });
        Ok(y)
    }

    /// Forward pass without caching (evaluation-only paths).
    pub fn forward_inference(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "DenseLayer::forward",
                expected: vec![self.input_dim()],
                got: vec![x.cols()],
            });
        }
        let act = self.activation;
        let y = x
            .matmul(&self.weights)?
            .add_row_broadcast(&self.bias)?
            .map(|v| act.apply(v));
        y.ensure_finite("DenseLayer::forward")?;
        Ok(y)
    }

    /// Backward pass for the most recent un-consumed forward call.
    /// Accumulates parameter gradients internally and returns the input
    /// gradient.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .pop()
            .ok_or(Error::MissingForwardCache("DenseLayer::backward"))?;
        if upstream.shape() != cache.pre.shape() {
            return Err(Error::ShapeMismatch {
                context: "DenseLayer::backward",
                expected: cache.pre.shape().to_vec(),
                got: upstream.shape().to_vec(),
            });
        }
        let act = self.activation;
        let d_pre = upstream.zip_grad(&cache.pre, |dy, pre| dy * act.derivative(pre))?;

        let dw = cache.input.matmul_at_b(&d_pre)?;
        let db = d_pre.column_sums();
        match &mut self.grad_weights {
            Some(g) => g.add_assign(&dw)?,
            None => self.grad_weights = Some(dw),
        }
        match &mut self.grad_bias {
            Some(g) => g.add_assign(&db)?,
            None => self.grad_bias = Some(db),
        }

        d_pre.matmul_a_bt(&self.weights)
    }

    /// Drain accumulated gradients, adding the L2 term `2·λ·w` once.
    /// Bias terms are not regularized.
    pub fn take_grads(&mut self, lambda: f64) -> Vec<(&'static str, Tensor)> {
        let mut gw = self
            .grad_weights
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.weights.shape()));
        if lambda != 0.0 {
            // add_assign over identical shapes cannot fail
            gw.add_assign(&self.weights.scale(2.0 * lambda)).unwrap();
        }
        let gb = self
            .grad_bias
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.bias.shape()));
        vec![("w", gw), ("b", gb)]
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w", &self.weights), ("b", &self.bias)]
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(&'static str, &mut Tensor)) {
        f("w", &mut self.weights);
        f("b", &mut self.bias);
    }

    /// Drop any cached forward state (end of batch / inference boundary).
    pub fn clear_cache(&mut self) {
        self.cache.clear();
        self.grad_weights = None;
        self.grad_bias = None;
    }

    pub fn pending_backwards(&self) -> usize {
        self.cache.len()
    }
}

impl Tensor {
    /// Elementwise combine against a same-shape tensor; helper for layer
    /// backward passes (`dy ⊙ act'(pre)`).
    pub(crate) fn zip_grad(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::zip_grad",
                expected: self.shape().to_vec(),
                got: other.shape().to_vec(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(self.shape(), data)
    }

    /// Sum each column of a rank-2 tensor into a rank-1 tensor.
    pub(crate) fn column_sums(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor::vector(&out)
    }
}
