//! Centralized single-process model, used as the equivalence oracle for the
//! distributed pipeline: same layers, same seeds, same loop order, so the
//! distributed run with one worker per NET must match it bitwise.

use super::decoder::DecoderHead;
use super::encoder::Encoder;
use super::merge::{merge, split_merged_grad, MergedVector};
use super::{MergeFn, ModelConfig};
use crate::error::{Error, Result};
use crate::loss::mse_loss;
use crate::optim::AdamState;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;
use crate::topology::{NetId, Topology, WorkerId};
use std::collections::BTreeMap;

/// One training sample: the window each worker contributes for one anchor
/// timestep, plus the coordinator-held groundtruth horizon.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub windows: BTreeMap<(NetId, WorkerId), Tensor>,
    /// Normalized groundtruth over the horizon, `[p]`.
    pub target: Tensor,
    /// Absolute anchor index in the source series, for tracing.
    pub anchor: u64,
}

/// Seed label for a NET's encoder initialization; shared by the monolith and
/// the distributed workers so both start from identical weights.
pub fn encoder_seed_label(net: NetId) -> String {
    format!("init/encoder/{net}")
}

/// Seed label for the coordinator's decoder/head initialization.
pub const DECODER_SEED_LABEL: &str = "init/decoder";

/// The whole architecture in one process: one encoder per NET, the merge
/// step, and the decoder/head, trained by a single optimizer.
pub struct CentralizedModel {
    pub encoders: BTreeMap<NetId, Encoder>,
    pub decoder_head: DecoderHead,
    pub merge_fn: MergeFn,
    /// `(interconnection id, member NETs ascending)`, ascending by id.
    pub interconnections: Vec<(u32, Vec<NetId>)>,
    pub l2_lambda: f64,
    pub adam: AdamState,
}

/// Build the oracle model. Rejects topologies with more than one worker per
/// NET — the monolith models exactly the one-worker-per-NET regime.
pub fn build_centralized_monolith(
    config: &ModelConfig,
    topology: &Topology,
    master_seed: u64,
) -> Result<CentralizedModel> {
    config.validate()?;
    topology.validate()?;
    for net in &topology.nets {
        if net.worker_count > 1 {
            return Err(Error::InvalidConfig(format!(
                "centralized oracle requires one worker per NET, {} has {}",
                net.net_id, net.worker_count
            )));
        }
    }

    let mut encoders = BTreeMap::new();
    for net in &topology.nets {
        let spec = config.encoders.get(&net.net_id).ok_or_else(|| {
            Error::InvalidConfig(format!("no encoder spec for {}", net.net_id))
        })?;
        let mut rng = seeded_rng(master_seed, &encoder_seed_label(net.net_id));
        encoders.insert(
            net.net_id,
            Encoder::new(spec, net.history_steps, &mut rng)?,
        );
    }

    let mut interconnections = Vec::new();
    for ic in &topology.interconnections {
        let mut nets: Vec<NetId> = ic.members.keys().copied().collect();
        nets.sort();
        interconnections.push((ic.id, nets));
    }
    interconnections.sort_by_key(|(id, _)| *id);

    let merged_dim = config.merged_dim(&interconnections[0].1)?;
    for (id, nets) in &interconnections {
        let dim = config.merged_dim(nets)?;
        if dim != merged_dim {
            return Err(Error::InvalidConfig(format!(
                "interconnection {id} merges to dimension {dim}, expected {merged_dim}: \
                 the shared decoder needs one merged width"
            )));
        }
    }
    let mut rng = seeded_rng(master_seed, DECODER_SEED_LABEL);
    let decoder_head = DecoderHead::new(&config.decoder, merged_dim, &mut rng)?;

    Ok(CentralizedModel {
        encoders,
        decoder_head,
        merge_fn: config.merge_fn,
        interconnections,
        l2_lambda: config.l2_lambda,
        adam: AdamState::new(config.learning_rate),
    })
}

impl CentralizedModel {
    fn window_for<'a>(
        sample: &'a TrainingSample,
        net: NetId,
    ) -> Result<&'a Tensor> {
        sample
            .windows
            .get(&(net, WorkerId(1)))
            .ok_or_else(|| Error::Dataset(format!("sample has no window for {net}/worker1")))
    }

    /// Forward one sample through every interconnection without caching.
    /// Returns `(interconnection id, prediction)` pairs in id order.
    pub fn predict(&self, sample: &TrainingSample) -> Result<Vec<(u32, Tensor)>> {
        let mut contexts: BTreeMap<NetId, Tensor> = BTreeMap::new();
        for (&net, encoder) in &self.encoders {
            contexts.insert(net, encoder.context_values(Self::window_for(sample, net)?)?);
        }
        let mut out = Vec::with_capacity(self.interconnections.len());
        for (id, nets) in &self.interconnections {
            let ctx_list: Vec<_> = nets
                .iter()
                .map(|&net| super::encoder::ContextVector {
                    values: contexts[&net].clone(),
                    net_id: net,
                    worker_id: WorkerId(1),
                    timestep: sample.anchor,
                })
                .collect();
            let merged = merge(&ctx_list, self.merge_fn, nets, *id, sample.anchor)?;
            out.push((*id, self.decoder_head.forward_inference(&merged.values)?));
        }
        Ok(out)
    }

    /// Mean MSE over `samples × interconnections` without touching caches.
    pub fn validation_mse(&self, samples: &[TrainingSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Dataset("validation set is empty".into()));
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for sample in samples {
            for (_, pred) in self.predict(sample)? {
                let (l, _) = mse_loss(&pred, &sample.target)?;
                total += l;
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// One optimizer step over a batch: forward every sample through every
    /// interconnection, backpropagate in exact reverse order, drain
    /// gradients (kernel L2 added once), and apply Adam per parameter.
    /// Returns the batch loss (mean over all `s × A × p` scalars).
    pub fn train_batch(&mut self, batch: &[TrainingSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty training batch".into()));
        }
        let s = batch.len();
        let a_count = self.interconnections.len();
        let scale = 1.0 / (s * a_count) as f64;

        // Forward pass, sample-major then interconnection order; one encode
        // per (NET, sample).
        let mut merged_store: Vec<Vec<MergedVector>> = Vec::with_capacity(s);
        let mut pred_grads: Vec<Vec<Tensor>> = Vec::with_capacity(s);
        let mut loss_sum = 0.0;
        for (i, sample) in batch.iter().enumerate() {
            let mut contexts: BTreeMap<NetId, super::encoder::ContextVector> = BTreeMap::new();
            for (&net, encoder) in self.encoders.iter_mut() {
                let window = Self::window_for(sample, net)?;
                let encoded = encoder.encode(window, net, WorkerId(1), i as u64)?;
                contexts.insert(net, encoded.context);
            }
            let mut merged_row = Vec::with_capacity(a_count);
            let mut grad_row = Vec::with_capacity(a_count);
            for (id, nets) in &self.interconnections {
                let ctx_list: Vec<_> = nets.iter().map(|net| contexts[net].clone()).collect();
                let merged = merge(&ctx_list, self.merge_fn, nets, *id, i as u64)?;
                let pred = self.decoder_head.forward(&merged.values)?;
                let (l, g) = mse_loss(&pred, &sample.target)?;
                loss_sum += l;
                grad_row.push(g.scale(scale));
                merged_row.push(merged);
            }
            merged_store.push(merged_row);
            pred_grads.push(grad_row);
        }
        let batch_loss = loss_sum * scale;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite("CentralizedModel::train_batch"));
        }

        // Backward pass in exact reverse: last (sample, interconnection)
        // first, matching the layers' LIFO caches. Slice gradients for one
        // worker accumulate across interconnections in this same descending
        // order.
        let mut slice_grads: Vec<BTreeMap<NetId, Tensor>> = vec![BTreeMap::new(); s];
        for i in (0..s).rev() {
            for a in (0..a_count).rev() {
                let d_merged = self.decoder_head.backward(&pred_grads[i][a])?;
                for (net, grad) in split_merged_grad(&merged_store[i][a], &d_merged)? {
                    match slice_grads[i].get_mut(&net) {
                        Some(acc) => acc.add_assign(&grad)?,
                        None => {
                            slice_grads[i].insert(net, grad);
                        }
                    }
                }
            }
            // All of sample i's slice gradients are complete; run the
            // encoder backward for this sample (LIFO over samples).
            for (&net, encoder) in self.encoders.iter_mut() {
                let d_context = slice_grads[i].get(&net).ok_or_else(|| {
                    Error::Protocol(format!("{net} received no slice gradient"))
                })?;
                encoder.backward_context(d_context)?;
            }
        }

        // Drain gradients and step. Coordinator-side parameters first, then
        // encoders in NET order — Adam is elementwise per parameter, so the
        // order only needs to be deterministic.
        self.adam.begin_step();
        let lambda = self.l2_lambda;
        let dec_grads: BTreeMap<String, Tensor> =
            self.decoder_head.take_grads(lambda).into_iter().collect();
        let mut failure = None;
        let adam = &mut self.adam;
        self.decoder_head.for_each_param(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            let full = format!("coordinator/{name}");
            match dec_grads.get(&name) {
                Some(g) => {
                    if let Err(e) = adam.update(&full, p, g) {
                        failure = Some(e);
                    }
                }
                None => failure = Some(Error::Protocol(format!("missing gradient {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        for (&net, encoder) in self.encoders.iter_mut() {
            let grads: BTreeMap<String, Tensor> =
                encoder.take_grads(lambda).into_iter().collect();
            let mut failure = None;
            encoder.for_each_param(&mut |name, p| {
                if failure.is_some() {
                    return;
                }
                let full = format!("{net}/{name}");
                match grads.get(&name) {
                    Some(g) => {
                        if let Err(e) = adam.update(&full, p, g) {
                            failure = Some(e);
                        }
                    }
                    None => failure = Some(Error::Protocol(format!("missing gradient {name}"))),
                }
            });
            if let Some(e) = failure {
                return Err(e);
            }
        }

        Ok(batch_loss)
    }

    /// All weights under stable names (`net{e}/…` and `coordinator/…`),
    /// ready for checkpointing.
    pub fn weights(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (net, encoder) in &self.encoders {
            for (name, p) in encoder.named_params() {
                out.insert(format!("{net}/{name}"), p.clone());
            }
        }
        for (name, p) in self.decoder_head.named_params() {
            out.insert(format!("coordinator/{name}"), p.clone());
        }
        out
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.encoders.values().map(|e| e.param_count()).sum::<usize>()
            + self.decoder_head.param_count()
    }
}
