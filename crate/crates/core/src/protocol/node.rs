//! The per-worker actor and the coordinator's shared forward/backward math.
//!
//! A [`WorkerNode`] owns one encoder copy and one optimizer. During a batch
//! loop it encodes its window batch into a `[s, N_e]` context matrix, later
//! receives the matching gradient matrix, backpropagates sample by sample in
//! reverse, and applies one optimizer step. The arithmetic mirrors the
//! centralized model operation for operation, which is what makes the
//! one-worker-per-entity equivalence exact.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::loss::mse_loss;
use crate::model::{
    encoder_seed_label, merge, split_merged_grad, ContextVector, DecoderHead, Encoder,
    EncoderSpec, MergeFn, MergedVector,
};
use crate::optim::AdamState;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;
use crate::topology::{NetId, Topology, WorkerId};
use crate::transport::Endpoint;

use super::WeightSet;

/// One interconnection, precomputed for the coordinator: its id, the
/// `(entity, worker)` members in ascending entity order, and the bare entity
/// list the merging layer wants.
#[derive(Debug, Clone)]
pub(crate) struct IcPlan {
    pub id: u32,
    pub members: Vec<(NetId, WorkerId)>,
    pub nets: Vec<NetId>,
}

impl IcPlan {
    fn worker_for(&self, net: NetId) -> Result<WorkerId> {
        self.members
            .iter()
            .find(|(n, _)| *n == net)
            .map(|(_, w)| *w)
            .ok_or_else(|| {
                Error::Protocol(format!("interconnection {} has no member of {net}", self.id))
            })
    }
}

/// Interconnections in ascending id order with members in ascending entity
/// order — the one loop order every forward and backward pass uses.
pub(crate) fn ic_plans(topology: &Topology) -> Vec<IcPlan> {
    let mut plans: Vec<IcPlan> = topology
        .interconnections
        .iter()
        .map(|ic| {
            let members: Vec<(NetId, WorkerId)> =
                ic.members.iter().map(|(&n, &w)| (n, w)).collect();
            let nets = members.iter().map(|(n, _)| *n).collect();
            IcPlan {
                id: ic.id,
                members,
                nets,
            }
        })
        .collect();
    plans.sort_by_key(|p| p.id);
    plans
}

/// One data-holding participant: an encoder copy plus its own optimizer.
pub struct WorkerNode {
    net: NetId,
    worker: WorkerId,
    encoder: Encoder,
    adam: AdamState,
    l2_lambda: f64,
    /// Cached forward passes awaiting their gradient matrix.
    pending_forwards: usize,
}

impl WorkerNode {
    /// Build with the entity's shared seed label, so every worker of an
    /// entity starts from bitwise-identical weights.
    pub(crate) fn new(
        net: NetId,
        worker: WorkerId,
        spec: &EncoderSpec,
        history_steps: usize,
        master_seed: u64,
        learning_rate: f64,
        l2_lambda: f64,
    ) -> Result<Self> {
        let mut rng = seeded_rng(master_seed, &encoder_seed_label(net));
        Ok(WorkerNode {
            net,
            worker,
            encoder: Encoder::new(spec, history_steps, &mut rng)?,
            adam: AdamState::new(learning_rate),
            l2_lambda,
            pending_forwards: 0,
        })
    }

    pub fn endpoint(&self) -> Endpoint {
        (self.net, self.worker)
    }

    pub fn context_dim(&self) -> usize {
        self.encoder.context_dim()
    }

    /// Encode a batch of windows into a `[s, N_e]` context matrix, caching
    /// each forward pass for the coming backward step.
    pub(crate) fn encode_training(&mut self, windows: &[&Tensor]) -> Result<Tensor> {
        if self.pending_forwards != 0 {
            return Err(Error::Protocol(format!(
                "{}/{} started encoding with {} gradients still outstanding",
                self.net, self.worker, self.pending_forwards
            )));
        }
        if windows.is_empty() {
            return Err(Error::Dataset("empty window batch".into()));
        }
        let mut out = Tensor::zeros(&[windows.len(), self.encoder.context_dim()]);
        for (i, window) in windows.iter().enumerate() {
            let encoded = self.encoder.encode(window, self.net, self.worker, i as u64)?;
            out.set_row(i, encoded.context.values.data())?;
        }
        self.pending_forwards = windows.len();
        Ok(out)
    }

    /// Encode without touching the training caches (validation rounds).
    pub(crate) fn encode_inference(&self, windows: &[&Tensor]) -> Result<Tensor> {
        if windows.is_empty() {
            return Err(Error::Dataset("empty window batch".into()));
        }
        let mut out = Tensor::zeros(&[windows.len(), self.encoder.context_dim()]);
        for (i, window) in windows.iter().enumerate() {
            let encoded =
                self.encoder
                    .encode_inference(window, self.net, self.worker, i as u64)?;
            out.set_row(i, encoded.context.values.data())?;
        }
        Ok(out)
    }

    /// Backpropagate the received `[s, N_e]` gradient matrix (samples in
    /// reverse, matching the encode order LIFO) and take one optimizer step.
    ///
    /// A worker that contributed no contexts this loop (it joined after the
    /// interconnections were fixed) legitimately receives an all-zero
    /// matrix; that is an idle round and returns `false`.
    pub(crate) fn apply_slice_grads(&mut self, grads: &Tensor) -> Result<bool> {
        if grads.rank() != 2 || grads.cols() != self.encoder.context_dim() {
            return Err(Error::ShapeMismatch {
                context: "WorkerNode::apply_slice_grads",
                expected: vec![self.pending_forwards, self.encoder.context_dim()],
                got: grads.shape().to_vec(),
            });
        }
        if self.pending_forwards == 0 {
            if grads.data().iter().all(|&v| v == 0.0) {
                return Ok(false);
            }
            return Err(Error::Protocol(format!(
                "{}/{} received nonzero context gradients without having sent contexts",
                self.net, self.worker
            )));
        }
        if grads.rows() != self.pending_forwards {
            return Err(Error::Protocol(format!(
                "{}/{} received gradients for {} samples, expected {}",
                self.net,
                self.worker,
                grads.rows(),
                self.pending_forwards
            )));
        }
        for i in (0..grads.rows()).rev() {
            self.encoder.backward_context(&grads.row_tensor(i))?;
        }
        self.pending_forwards = 0;

        let grad_map: BTreeMap<String, Tensor> =
            self.encoder.take_grads(self.l2_lambda).into_iter().collect();
        self.adam.begin_step();
        let adam = &mut self.adam;
        let net = self.net;
        let mut failure = None;
        self.encoder.for_each_param(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match grad_map.get(&name) {
                Some(g) => {
                    if let Err(e) = adam.update(&format!("{net}/{name}"), p, g) {
                        failure = Some(e);
                    }
                }
                None => failure = Some(Error::Protocol(format!("missing gradient {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(true)
    }

    /// Current encoder weights under their layer-local names.
    pub fn weights(&self) -> WeightSet {
        self.encoder
            .named_params()
            .into_iter()
            .map(|(name, p)| (name, p.clone()))
            .collect()
    }

    /// Overwrite every encoder parameter from `set` (bitwise copy). The
    /// name sets must match exactly.
    pub(crate) fn set_weights(&mut self, set: &WeightSet) -> Result<()> {
        self.encoder.set_params(set)
    }
}

/// The coordinator's trainable half: decoder/head plus its optimizer.
pub(crate) struct CoordinatorMath<'a> {
    pub decoder: &'a mut DecoderHead,
    pub adam: &'a mut AdamState,
    pub merge_fn: MergeFn,
    pub l2_lambda: f64,
}

impl CoordinatorMath<'_> {
    /// Steps ②–⑥ of one batch loop: merge every sample through every
    /// interconnection, compute the mean MSE over all `s × A × p` scalars,
    /// backpropagate in exact reverse order, update the decoder/head, and
    /// return the per-worker context-gradient matrices.
    ///
    /// Loop order is pinned: forward sample-major then interconnection
    /// ascending; backward the exact reverse; a worker's slice gradients
    /// accumulate across interconnections in that same descending order.
    /// The centralized oracle performs the identical sequence, so the two
    /// agree bitwise.
    pub(crate) fn forward_backward(
        &mut self,
        ics: &[IcPlan],
        contexts: &BTreeMap<Endpoint, Tensor>,
        targets: &[&Tensor],
    ) -> Result<(f64, BTreeMap<Endpoint, Tensor>)> {
        let s = targets.len();
        if s == 0 {
            return Err(Error::Dataset("empty training batch".into()));
        }
        if ics.is_empty() {
            return Err(Error::Protocol("no interconnections to merge".into()));
        }
        for ic in ics {
            for &(net, worker) in &ic.members {
                let m = contexts.get(&(net, worker)).ok_or_else(|| {
                    Error::Protocol(format!("missing context batch from {net}/{worker}"))
                })?;
                if m.rows() != s {
                    return Err(Error::Protocol(format!(
                        "context batch from {net}/{worker} has {} rows, expected {s}",
                        m.rows()
                    )));
                }
            }
        }
        let a_count = ics.len();
        let scale = 1.0 / (s * a_count) as f64;

        let mut merged_store: Vec<Vec<MergedVector>> = Vec::with_capacity(s);
        let mut pred_grads: Vec<Vec<Tensor>> = Vec::with_capacity(s);
        let mut loss_sum = 0.0;
        for i in 0..s {
            let mut merged_row = Vec::with_capacity(a_count);
            let mut grad_row = Vec::with_capacity(a_count);
            for ic in ics {
                let ctx_list: Vec<ContextVector> = ic
                    .members
                    .iter()
                    .map(|&(net, worker)| ContextVector {
                        values: contexts[&(net, worker)].row_tensor(i),
                        net_id: net,
                        worker_id: worker,
                        timestep: i as u64,
                    })
                    .collect();
                let merged = merge(&ctx_list, self.merge_fn, &ic.nets, ic.id, i as u64)?;
                let pred = self.decoder.forward(&merged.values)?;
                let (l, g) = mse_loss(&pred, targets[i])?;
                loss_sum += l;
                grad_row.push(g.scale(scale));
                merged_row.push(merged);
            }
            merged_store.push(merged_row);
            pred_grads.push(grad_row);
        }
        let batch_loss = loss_sum * scale;
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite("protocol batch loss"));
        }

        let mut grad_mats: BTreeMap<Endpoint, Tensor> = BTreeMap::new();
        for ic in ics {
            for &(net, worker) in &ic.members {
                grad_mats.entry((net, worker)).or_insert_with(|| {
                    Tensor::zeros(&[s, contexts[&(net, worker)].cols()])
                });
            }
        }
        for i in (0..s).rev() {
            let mut per_sample: BTreeMap<Endpoint, Tensor> = BTreeMap::new();
            for a in (0..a_count).rev() {
                let d_merged = self.decoder.backward(&pred_grads[i][a])?;
                for (net, grad) in split_merged_grad(&merged_store[i][a], &d_merged)? {
                    let worker = ics[a].worker_for(net)?;
                    match per_sample.get_mut(&(net, worker)) {
                        Some(acc) => acc.add_assign(&grad)?,
                        None => {
                            per_sample.insert((net, worker), grad);
                        }
                    }
                }
            }
            for (endpoint, grad) in per_sample {
                let mat = grad_mats.get_mut(&endpoint).ok_or_else(|| {
                    Error::Protocol(format!(
                        "gradient for unknown participant {}/{}",
                        endpoint.0, endpoint.1
                    ))
                })?;
                mat.set_row(i, grad.data())?;
            }
        }

        self.adam.begin_step();
        let dec_grads: BTreeMap<String, Tensor> =
            self.decoder.take_grads(self.l2_lambda).into_iter().collect();
        let adam = &mut *self.adam;
        let mut failure = None;
        self.decoder.for_each_param(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match dec_grads.get(&name) {
                Some(g) => {
                    if let Err(e) = adam.update(&format!("coordinator/{name}"), p, g) {
                        failure = Some(e);
                    }
                }
                None => failure = Some(Error::Protocol(format!("missing gradient {name}"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }

        Ok((batch_loss, grad_mats))
    }
}

/// Inference-only pass for validation rounds: returns the summed MSE and
/// the number of `(sample, interconnection)` pairs, so callers can pool
/// chunks before dividing once.
pub(crate) fn validate_chunk(
    decoder: &DecoderHead,
    merge_fn: MergeFn,
    ics: &[IcPlan],
    contexts: &BTreeMap<Endpoint, Tensor>,
    targets: &[&Tensor],
) -> Result<(f64, usize)> {
    let s = targets.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..s {
        for ic in ics {
            let ctx_list: Vec<ContextVector> = ic
                .members
                .iter()
                .map(|&(net, worker)| {
                    let m = contexts.get(&(net, worker)).ok_or_else(|| {
                        Error::Protocol(format!("missing context batch from {net}/{worker}"))
                    })?;
                    Ok(ContextVector {
                        values: m.row_tensor(i),
                        net_id: net,
                        worker_id: worker,
                        timestep: i as u64,
                    })
                })
                .collect::<Result<_>>()?;
            let merged = merge(&ctx_list, merge_fn, &ic.nets, ic.id, i as u64)?;
            let pred = decoder.forward_inference(&merged.values)?;
            let (l, _) = mse_loss(&pred, targets[i])?;
            total += l;
            count += 1;
        }
    }
    Ok((total, count))
}
