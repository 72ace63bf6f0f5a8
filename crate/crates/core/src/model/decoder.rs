//! Decoder and prediction head, owned by the coordinator.
//!
//! A merged vector is tiled over the horizon to form the decoder's input
//! sequence (repeat-vector seeding, zero initial states); each decoder
//! hidden state passes through the shared dense head down to one scalar,
//! yielding a length-`p` forecast.

use super::DecoderHeadSpec;
use crate::error::{Error, Result};
use crate::layers::{DenseLayer, LstmLayer};
use crate::tensor::Tensor;
use rand::Rng;

pub struct DecoderHead {
    pub decoder: LstmLayer,
    /// Dense head layers, applied per decoder step with shared weights;
    /// final layer has width 1.
    pub head: Vec<DenseLayer>,
    pub horizon_steps: usize,
    merged_dim: usize,
}

impl DecoderHead {
    pub fn new(spec: &DecoderHeadSpec, merged_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if merged_dim == 0 {
            return Err(Error::InvalidConfig("merged dimension must be positive".into()));
        }
        let decoder = LstmLayer::new(merged_dim, spec.decoder_units, rng);
        let mut head = Vec::with_capacity(spec.head_layers.len());
        let mut fan_in = spec.decoder_units;
        for &(width, activation) in &spec.head_layers {
            head.push(DenseLayer::new(fan_in, width, activation, rng));
            fan_in = width;
        }
        // The output layer's ReLU would freeze the whole model if every
        // pre-activation started non-positive (zero gradient through a dead
        // clamp). A small positive bias puts it in the linear region; the
        // KPI targets are non-negative anyway.
        if let Some(last) = head.last_mut() {
            last.bias = Tensor::filled(&[last.output_dim()], 0.1);
        }
        Ok(DecoderHead {
            decoder,
            head,
            horizon_steps: spec.horizon_steps,
            merged_dim,
        })
    }

    pub fn merged_dim(&self) -> usize {
        self.merged_dim
    }

    /// Tile `m` into the decoder input sequence `[p, M]`.
    fn repeat_input(&self, merged: &Tensor) -> Result<Tensor> {
        if merged.len() != self.merged_dim {
            return Err(Error::ShapeMismatch {
                context: "DecoderHead::forward",
                expected: vec![self.merged_dim],
                got: vec![merged.len()],
            });
        }
        let mut data = Vec::with_capacity(self.horizon_steps * merged.len());
        for _ in 0..self.horizon_steps {
            data.extend_from_slice(merged.data());
        }
        Tensor::from_vec(&[self.horizon_steps, merged.len()], data)
    }

    /// Forecast from one merged vector; caches for backward.
    pub fn forward(&mut self, merged: &Tensor) -> Result<Tensor> {
        let seq = self.repeat_input(merged)?;
        let zeros = Tensor::zeros(&[self.decoder.units]);
        let out = self.decoder.forward(&seq, &zeros, &zeros)?;
        let mut x = out.hidden_seq; // [p, units]
        for layer in self.head.iter_mut() {
            x = layer.forward(&x)?;
        }
        x.reshape(&[self.horizon_steps])
    }

    /// Forecast without caching.
    pub fn forward_inference(&self, merged: &Tensor) -> Result<Tensor> {
        let seq = self.repeat_input(merged)?;
        let zeros = Tensor::zeros(&[self.decoder.units]);
        let out = self.decoder.forward_inference(&seq, &zeros, &zeros)?;
        let mut x = out.hidden_seq;
        for layer in self.head.iter() {
            x = layer.forward_inference(&x)?;
        }
        x.reshape(&[self.horizon_steps])
    }

    /// Backward from a prediction gradient `[p]` to the merged-vector
    /// gradient `[M]`. Parameter gradients accumulate internally. The tiled
    /// input means the merged-vector gradient is the sum over all horizon
    /// steps of the decoder's per-step input gradients.
    pub fn backward(&mut self, d_pred: &Tensor) -> Result<Tensor> {
        if d_pred.len() != self.horizon_steps {
            return Err(Error::ShapeMismatch {
                context: "DecoderHead::backward",
                expected: vec![self.horizon_steps],
                got: vec![d_pred.len()],
            });
        }
        let mut d = d_pred.clone().reshape(&[self.horizon_steps, 1])?;
        for layer in self.head.iter_mut().rev() {
            d = layer.backward(&d)?;
        }
        let input_grads = self.decoder.backward(&d, None, None)?;
        // Collapse the tiled input: Σ over horizon rows.
        Ok(input_grads.d_seq.column_sums_public())
    }

    /// Drain accumulated gradients; kernel L2 added once per drain.
    pub fn take_grads(&mut self, lambda: f64) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, g) in self.decoder.take_grads(lambda) {
            out.push((format!("dec.{name}"), g));
        }
        for (i, layer) in self.head.iter_mut().enumerate() {
            for (name, g) in layer.take_grads(lambda) {
                out.push((format!("head{i}.{name}"), g));
            }
        }
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, p) in self.decoder.named_params() {
            out.push((format!("dec.{name}"), p));
        }
        for (i, layer) in self.head.iter().enumerate() {
            for (name, p) in layer.named_params() {
                out.push((format!("head{i}.{name}"), p));
            }
        }
        out
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.decoder
            .for_each_param(&mut |n, p| f(format!("dec.{n}"), p));
        for (i, layer) in self.head.iter_mut().enumerate() {
            layer.for_each_param(&mut |n, p| f(format!("head{i}.{n}"), p));
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn clear_cache(&mut self) {
        self.decoder.clear_cache();
        self.head.iter_mut().for_each(|l| l.clear_cache());
    }
}

impl Tensor {
    /// Public alias for column sums (used by the decoder's tiled-input
    /// collapse and by evaluation aggregation).
    pub fn column_sums_public(&self) -> Tensor {
        self.column_sums()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Activation;
    use crate::rng::seeded_rng;

    fn tiny_spec(p: usize) -> DecoderHeadSpec {
        DecoderHeadSpec {
            decoder_units: 3,
            head_layers: vec![(2, Activation::Relu), (1, Activation::Relu)],
            horizon_steps: p,
        }
    }

    #[test]
    fn horizon_of_100_covers_20_seconds_at_200ms() {
        // 20000 ms horizon at one prediction per 200 ms → 100 steps.
        assert_eq!(20_000 / 200, 100);
        let mut rng = seeded_rng(4, "decoder.horizon");
        let spec = DecoderHeadSpec {
            decoder_units: 4,
            head_layers: vec![(1, Activation::Relu)],
            horizon_steps: 100,
        };
        let mut dh = DecoderHead::new(&spec, 2, &mut rng).unwrap();
        let pred = dh.forward(&Tensor::vector(&[0.3, 0.7])).unwrap();
        assert_eq!(pred.len(), 100);
    }

    #[test]
    fn zero_merged_vector_zero_bias_network_predicts_zero() {
        let mut rng = seeded_rng(5, "decoder.zero");
        let mut dh = DecoderHead::new(&tiny_spec(4), 2, &mut rng).unwrap();
        for layer in &mut dh.head {
            layer.bias = Tensor::zeros(&[layer.output_dim()]);
        }
        // Zero input → zero LSTM state (biases are zero) → the head sees
        // zeros and its zero bias keeps the output at zero.
        let pred = dh.forward(&Tensor::zeros(&[2])).unwrap();
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_config_matches_recurrence_plus_affine_oracle() {
        let (m_dim, p) = (2, 3);
        let mut rng = seeded_rng(9, "decoder.oracle");
        let spec = DecoderHeadSpec {
            decoder_units: 2,
            head_layers: vec![(1, Activation::Identity)],
            horizon_steps: p,
        };
        let mut dh = DecoderHead::new(&spec, m_dim, &mut rng).unwrap();
        let m = Tensor::vector(&[0.4, -0.3]);
        let pred = dh.forward(&m).unwrap();

        // Independent oracle: LSTM recurrence over the tiled input, then the
        // affine head, all in scalar loops.
        let u = 2;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0; u];
        let mut c = vec![0.0; u];
        for t in 0..p {
            let mut z = vec![0.0; 4 * u];
            for (col, zv) in z.iter_mut().enumerate() {
                let mut acc = dh.decoder.bias.data()[col];
                for q in 0..m_dim {
                    acc += m.data()[q] * dh.decoder.w_input.get(q, col);
                }
                for q in 0..u {
                    acc += h[q] * dh.decoder.w_recurrent.get(q, col);
                }
                *zv = acc;
            }
            let (mut h2, mut c2) = (vec![0.0; u], vec![0.0; u]);
            for j in 0..u {
                let i = sig(z[j]);
                let f = sig(z[u + j]);
                let g = z[2 * u + j].tanh();
                let o = sig(z[3 * u + j]);
                c2[j] = f * c[j] + i * g;
                h2[j] = o * c2[j].tanh();
            }
            h = h2;
            c = c2;
            let mut y = dh.head[0].bias.data()[0];
            for q in 0..u {
                y += h[q] * dh.head[0].weights.get(q, 0);
            }
            assert!(
                (pred.data()[t] - y).abs() < 1e-12,
                "step {t} diverges from oracle: {} vs {y}",
                pred.data()[t]
            );
        }
    }

    #[test]
    fn prediction_length_is_horizon_regardless_of_merged_dim() {
        for (m_dim, p) in [(1, 2), (5, 7), (8, 3)] {
            let mut rng = seeded_rng(6, "decoder.shape");
            let mut dh = DecoderHead::new(&tiny_spec(p), m_dim, &mut rng).unwrap();
            let m = Tensor::filled(&[m_dim], 0.2);
            assert_eq!(dh.forward(&m).unwrap().len(), p);
        }
    }

    #[test]
    fn wrong_merged_dim_is_rejected() {
        let mut rng = seeded_rng(7, "decoder.baddim");
        let mut dh = DecoderHead::new(&tiny_spec(3), 4, &mut rng).unwrap();
        assert!(dh.forward(&Tensor::zeros(&[3])).is_err());
    }
}
