//! Per-worker encoders: feature window in, context vector out.

use super::{EncoderKind, EncoderSpec};
use crate::error::{Error, Result};
use crate::layers::{Activation, BiLstmLayer, DenseLayer, LstmLayer};
use crate::tensor::Tensor;
use crate::topology::{NetId, WorkerId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// The fixed-length activation a worker publishes for one window — the only
/// thing derived from raw features that ever leaves the worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextVector {
    pub values: Tensor,
    pub net_id: NetId,
    pub worker_id: WorkerId,
    /// Window anchor index within the current batch/evaluation order.
    pub timestep: u64,
}

impl ContextVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// An all-zero context carries no information downstream; the merging
    /// step assumes contexts are non-zero.
    pub fn is_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// Context vector plus the degeneracy flag raised when the encoder emitted
/// all zeros (reported upstream as a warning, never silently passed).
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub context: ContextVector,
    pub zero_output: bool,
}

enum EncoderState {
    BiLstm(BiLstmLayer),
    Lstm(LstmLayer),
    /// Dense layers applied to the flattened window.
    DenseStack(Vec<DenseLayer>),
}

/// A live encoder instance owned by one worker.
pub struct Encoder {
    spec: EncoderSpec,
    state: EncoderState,
    /// History length of the last cached forward, needed to shape the
    /// backward pass.
    last_history: Vec<usize>,
}

impl Encoder {
    /// Initialize from a spec with seeded Glorot-uniform weights. Two
    /// encoders built from the same spec and an identically seeded RNG are
    /// bitwise identical.
    pub fn new(spec: &EncoderSpec, history_steps: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let state = match spec.kind {
            EncoderKind::Bilstm => {
                EncoderState::BiLstm(BiLstmLayer::new(spec.input_width, spec.units, rng))
            }
            EncoderKind::Lstm => {
                EncoderState::Lstm(LstmLayer::new(spec.input_width, spec.units, rng))
            }
            EncoderKind::DenseStack => {
                let flat = spec.input_width * history_steps;
                EncoderState::DenseStack(vec![
                    DenseLayer::new(flat, spec.units, Activation::Relu, rng),
                    DenseLayer::new(spec.units, spec.units, Activation::Relu, rng),
                ])
            }
        };
        Ok(Encoder {
            spec: spec.clone(),
            state,
            last_history: Vec::new(),
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn context_dim(&self) -> usize {
        self.spec.context_dim()
    }

    /// Encode a normalized window `[h, features]`; caches for backward.
    pub fn encode(
        &mut self,
        window: &Tensor,
        net_id: NetId,
        worker_id: WorkerId,
        timestep: u64,
    ) -> Result<EncodedContext> {
        let values = self.run(window, true)?;
        self.last_history.push(window.rows());
        self.finish(values, net_id, worker_id, timestep)
    }

    /// Encode without caching (evaluation, attack replay).
    pub fn encode_inference(
        &self,
        window: &Tensor,
        net_id: NetId,
        worker_id: WorkerId,
        timestep: u64,
    ) -> Result<EncodedContext> {
        if window.cols() != self.spec.input_width {
            return Err(Error::ShapeMismatch {
                context: "Encoder::encode",
                expected: vec![self.spec.input_width],
                got: vec![window.cols()],
            });
        }
        let values = self.run_ref(window)?;
        self.finish(values, net_id, worker_id, timestep)
    }

    fn finish(
        &self,
        values: Tensor,
        net_id: NetId,
        worker_id: WorkerId,
        timestep: u64,
    ) -> Result<EncodedContext> {
        values.ensure_finite("Encoder::encode")?;
        let context = ContextVector {
            values,
            net_id,
            worker_id,
            timestep,
        };
        let zero_output = context.is_zero();
        Ok(EncodedContext {
            context,
            zero_output,
        })
    }

    fn run(&mut self, window: &Tensor, cache: bool) -> Result<Tensor> {
        if window.cols() != self.spec.input_width {
            return Err(Error::ShapeMismatch {
                context: "Encoder::encode",
                expected: vec![self.spec.input_width],
                got: vec![window.cols()],
            });
        }
        if !cache {
            return self.run_ref(window);
        }
        match &mut self.state {
            EncoderState::BiLstm(layer) => Ok(layer.forward(window)?.combined_final),
            EncoderState::Lstm(layer) => {
                let zeros = Tensor::zeros(&[layer.units]);
                Ok(layer.forward(window, &zeros, &zeros)?.h_last)
            }
            EncoderState::DenseStack(layers) => {
                let mut x = window
                    .clone()
                    .reshape(&[1, window.rows() * window.cols()])?;
                for layer in layers.iter_mut() {
                    x = layer.forward(&x)?;
                }
                let width = x.cols();
                x.reshape(&[width])
            }
        }
    }

    /// `run` needs `&mut` only for caching; inference goes through a shared
    /// reference.
    fn run_ref(&self, window: &Tensor) -> Result<Tensor> {
        match &self.state {
            EncoderState::BiLstm(layer) => Ok(layer.forward_inference(window)?.combined_final),
            EncoderState::Lstm(layer) => {
                let zeros = Tensor::zeros(&[layer.units]);
                Ok(layer.forward_inference(window, &zeros, &zeros)?.h_last)
            }
            EncoderState::DenseStack(layers) => {
                let mut x = window
                    .clone()
                    .reshape(&[1, window.rows() * window.cols()])?;
                for layer in layers {
                    x = layer.forward_inference(&x)?;
                }
                let width = x.cols();
                x.reshape(&[width])
            }
        }
    }

    /// Backward from a context-vector gradient to the input-window gradient;
    /// parameter gradients accumulate inside the layers. Pops the most
    /// recent cached forward (LIFO).
    pub fn backward_context(&mut self, d_context: &Tensor) -> Result<Tensor> {
        if d_context.len() != self.spec.context_dim() {
            return Err(Error::ShapeMismatch {
                context: "Encoder::backward_context",
                expected: vec![self.spec.context_dim()],
                got: vec![d_context.len()],
            });
        }
        let history = self
            .last_history
            .pop()
            .ok_or(Error::MissingForwardCache("Encoder::backward_context"))?;
        match &mut self.state {
            EncoderState::BiLstm(layer) => layer.backward(None, Some(d_context), history),
            EncoderState::Lstm(layer) => {
                let zeros = Tensor::zeros(&[history, layer.units]);
                let grads = layer.backward(&zeros, Some(d_context), None)?;
                Ok(grads.d_seq)
            }
            EncoderState::DenseStack(layers) => {
                let mut d = d_context.clone().reshape(&[1, d_context.len()])?;
                for layer in layers.iter_mut().rev() {
                    d = layer.backward(&d)?;
                }
                let width = d.cols() / history.max(1);
                d.reshape(&[history, width])
            }
        }
    }

    /// Drain accumulated parameter gradients; kernel L2 added once.
    pub fn take_grads(&mut self, lambda: f64) -> Vec<(String, Tensor)> {
        match &mut self.state {
            EncoderState::BiLstm(layer) => layer.take_grads(lambda),
            EncoderState::Lstm(layer) => layer
                .take_grads(lambda)
                .into_iter()
                .map(|(n, g)| (n.to_string(), g))
                .collect(),
            EncoderState::DenseStack(layers) => layers
                .iter_mut()
                .enumerate()
                .flat_map(|(i, layer)| {
                    layer
                        .take_grads(lambda)
                        .into_iter()
                        .map(move |(n, g)| (format!("d{i}.{n}"), g))
                })
                .collect(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match &self.state {
            EncoderState::BiLstm(layer) => layer.named_params(),
            EncoderState::Lstm(layer) => layer
                .named_params()
                .into_iter()
                .map(|(n, p)| (n.to_string(), p))
                .collect(),
            EncoderState::DenseStack(layers) => layers
                .iter()
                .enumerate()
                .flat_map(|(i, layer)| {
                    layer
                        .named_params()
                        .into_iter()
                        .map(move |(n, p)| (format!("d{i}.{n}"), p))
                })
                .collect(),
        }
    }

    pub fn for_each_param(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match &mut self.state {
            EncoderState::BiLstm(layer) => layer.for_each_param(f),
            EncoderState::Lstm(layer) => {
                layer.for_each_param(&mut |n, p| f(n.to_string(), p));
            }
            EncoderState::DenseStack(layers) => {
                for (i, layer) in layers.iter_mut().enumerate() {
                    layer.for_each_param(&mut |n, p| f(format!("d{i}.{n}"), p));
                }
            }
        }
    }

    /// Overwrite every parameter from `set` (bitwise copy). The name sets
    /// must match exactly; shapes are checked tensor by tensor.
    pub fn set_params(&mut self, set: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut failure = None;
        let mut applied = 0usize;
        self.for_each_param(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match set.get(&name) {
                Some(t) if t.shape() == p.shape() => {
                    *p = t.clone();
                    applied += 1;
                }
                Some(t) => {
                    failure = Some(Error::ShapeMismatch {
                        context: "Encoder::set_params",
                        expected: p.shape().to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                None => {
                    failure = Some(Error::Protocol(format!(
                        "weight set is missing tensor {name:?}"
                    )));
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if applied != set.len() {
            return Err(Error::Protocol(format!(
                "weight set carries {} tensors, encoder has {applied}",
                set.len()
            )));
        }
        Ok(())
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn clear_cache(&mut self) {
        self.last_history.clear();
        match &mut self.state {
            EncoderState::BiLstm(layer) => layer.clear_cache(),
            EncoderState::Lstm(layer) => layer.clear_cache(),
            EncoderState::DenseStack(layers) => layers.iter_mut().for_each(|l| l.clear_cache()),
        }
    }

    /// Encode through a shared reference (no caching); used by evaluation.
    pub fn context_values(&self, window: &Tensor) -> Result<Tensor> {
        let values = self.run_ref(window)?;
        values.ensure_finite("Encoder::context_values")?;
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn spec(kind: EncoderKind, units: usize, width: usize) -> EncoderSpec {
        EncoderSpec {
            kind,
            units,
            input_width: width,
        }
    }

    #[test]
    fn zero_weight_encoder_raises_the_zero_flag() {
        let mut rng = seeded_rng(0, "encoder.zero");
        let mut enc = Encoder::new(&spec(EncoderKind::Bilstm, 2, 3), 4, &mut rng).unwrap();
        // Zero every parameter.
        enc.for_each_param(&mut |_, p| *p = Tensor::zeros(p.shape()));
        let window = Tensor::filled(&[4, 3], 0.5);
        let out = enc.encode(&window, NetId(1), WorkerId(1), 0).unwrap();
        assert!(out.zero_output, "all-zero context must be flagged");
        assert!(out.context.is_zero());
    }

    #[test]
    fn preset_sized_encoder_yields_context_length_200() {
        let mut rng = seeded_rng(1, "encoder.c1.dim");
        let enc = Encoder::new(&spec(EncoderKind::Bilstm, 100, 6), 8, &mut rng).unwrap();
        assert_eq!(enc.context_dim(), 200);
        let window = Tensor::filled(&[8, 6], 0.1);
        let out = enc
            .encode_inference(&window, NetId(1), WorkerId(1), 0)
            .unwrap();
        assert_eq!(out.context.len(), 200);
        assert!(!out.zero_output);
    }

    #[test]
    fn tiny_bilstm_encoder_matches_independent_recurrence() {
        let mut rng = seeded_rng(3, "encoder.oracle");
        let mut enc = Encoder::new(&spec(EncoderKind::Bilstm, 2, 2), 4, &mut rng).unwrap();
        let window = Tensor::matrix(&[
            &[0.1, 0.9],
            &[0.4, 0.3],
            &[0.7, 0.2],
            &[0.5, 0.6],
        ])
        .unwrap();
        let out = enc.encode(&window, NetId(1), WorkerId(1), 0).unwrap();

        // Independent oracle: run both directions by hand from the raw
        // parameter tensors. Parameter order per direction: w_x, w_h, b.
        let params: std::collections::BTreeMap<String, Tensor> = enc
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.clone()))
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let run_dir = |prefix: &str, order: &[usize]| -> Vec<f64> {
            let w_x = &params[&format!("{prefix}.w_x")];
            let w_h = &params[&format!("{prefix}.w_h")];
            let b = &params[&format!("{prefix}.b")];
            let u = 2;
            let mut h = vec![0.0; u];
            let mut c = vec![0.0; u];
            for &t in order {
                let mut z = vec![0.0; 4 * u];
                for (col, zv) in z.iter_mut().enumerate() {
                    let mut acc = b.data()[col];
                    for p in 0..2 {
                        acc += window.get(t, p) * w_x.get(p, col);
                    }
                    for p in 0..u {
                        acc += h[p] * w_h.get(p, col);
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
            }
            h
        };
        let mut expected = run_dir("fwd", &[0, 1, 2, 3]);
        expected.extend(run_dir("bwd", &[3, 2, 1, 0]));
        for (got, want) in out.context.values.data().iter().zip(&expected) {
            assert!(
                (got - want).abs() < 1e-12,
                "encoder context diverges from recurrence oracle: {got} vs {want}"
            );
        }
    }

    #[test]
    fn identical_seeds_build_identical_encoders() {
        let spec = spec(EncoderKind::Lstm, 3, 2);
        let a = Encoder::new(&spec, 4, &mut seeded_rng(9, "enc")).unwrap();
        let b = Encoder::new(&spec, 4, &mut seeded_rng(9, "enc")).unwrap();
        for ((na, pa), (nb, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa, pb, "parameter {na} differs across identical seeds");
        }
    }

    #[test]
    fn wrong_feature_width_is_rejected() {
        let mut rng = seeded_rng(2, "encoder.width");
        let mut enc = Encoder::new(&spec(EncoderKind::Lstm, 2, 3), 4, &mut rng).unwrap();
        let window = Tensor::filled(&[4, 2], 0.1);
        assert!(enc.encode(&window, NetId(1), WorkerId(1), 0).is_err());
    }
}
