//! A full deployment wired over the in-process bus: every entity's workers,
//! the coordinator (merge + decoder/head, co-located with worker 1 of the
//! active entity), and one aggregator per entity (co-located with its
//! worker 1).
//!
//! Message budget per training batch loop, with `K_e` live workers of
//! entity `e`: `Σ_e K_e − 1` context uploads (the coordinator's own worker
//! hands its contexts over in process — the one documented local shortcut),
//! and exactly `Σ_e K_e` gradient returns, weight reports, and global
//! weight broadcasts. Everything else co-located still crosses the bus, so
//! those three counts hold exactly and the payload audit sees every
//! transported tensor.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::model::{
    merge, ContextVector, DecoderHead, ModelConfig, TrainingSample, DECODER_SEED_LABEL,
};
use crate::optim::AdamState;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;
use crate::topology::{NetId, Topology, WorkerId};
use crate::transport::{
    Endpoint, Envelope, InProcessBus, MessageMeter, MsgType, Phase, CONTEXTS_TENSOR,
    CONTEXT_GRADS_TENSOR,
};

use super::node::{ic_plans, validate_chunk, CoordinatorMath, IcPlan, WorkerNode};
use super::{
    aggregate_weights, weight_checksum, BatchPlan, GlobalEncoderStore, ProtocolStep, RoundTrace,
    SchedulerMode, TraceEvent, WeightSet,
};

/// What one batch loop produced: the loss, the ordered actor/step trace,
/// and each entity's post-aggregation weight checksum.
#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub loss: f64,
    pub trace: Vec<TraceEvent>,
    pub checksums: BTreeMap<NetId, String>,
}

/// All actors of one training deployment plus the bus between them.
pub struct Cluster {
    config: ModelConfig,
    master_seed: u64,
    mode: SchedulerMode,
    timeout: Duration,
    bus: InProcessBus,
    coordinator: Endpoint,
    ics: Vec<IcPlan>,
    /// Workers named by at least one interconnection; only they move
    /// contexts and receive nonzero gradients.
    participants: BTreeSet<Endpoint>,
    /// Live workers per entity, in ascending id order; grows on joins.
    roster: BTreeMap<NetId, Vec<WorkerId>>,
    /// Window length per entity, needed to provision joiners.
    history: BTreeMap<NetId, usize>,
    nodes: Vec<WorkerNode>,
    node_index: BTreeMap<Endpoint, usize>,
    decoder: DecoderHead,
    dec_adam: AdamState,
    store: GlobalEncoderStore,
    /// The inputs of each entity's most recent aggregation, for
    /// introspection in tests and audits.
    last_reports: BTreeMap<NetId, Vec<(WorkerId, WeightSet)>>,
}

impl Cluster {
    pub fn new(
        config: &ModelConfig,
        topology: &Topology,
        master_seed: u64,
        mode: SchedulerMode,
    ) -> Result<Self> {
        config.validate()?;
        topology.validate()?;
        let coordinator_net = topology
            .coordinator()
            .ok_or_else(|| Error::Topology(vec!["no active entity".into()]))?;
        let coordinator: Endpoint = (coordinator_net, WorkerId(1));

        let ics = ic_plans(topology);
        if ics.is_empty() {
            return Err(Error::Topology(vec!["no interconnections".into()]));
        }
        let merged_dim = config.merged_dim(&ics[0].nets)?;
        for ic in &ics {
            let dim = config.merged_dim(&ic.nets)?;
            if dim != merged_dim {
                return Err(Error::InvalidConfig(format!(
                    "interconnection {} merges to dimension {dim}, expected {merged_dim}: \
                     the shared decoder needs one merged width",
                    ic.id
                )));
            }
        }
        let mut participants = BTreeSet::new();
        for ic in &ics {
            for &member in &ic.members {
                participants.insert(member);
            }
        }

        let bus = InProcessBus::new();
        let mut nodes = Vec::new();
        let mut node_index = BTreeMap::new();
        let mut roster = BTreeMap::new();
        let mut history = BTreeMap::new();
        let mut nets_sorted = topology.nets.clone();
        nets_sorted.sort_by_key(|n| n.net_id);
        for net in &nets_sorted {
            history.insert(net.net_id, net.history_steps);
            let spec = config.encoders.get(&net.net_id).ok_or_else(|| {
                Error::InvalidConfig(format!("no encoder spec for {}", net.net_id))
            })?;
            let mut ids = Vec::new();
            for worker in net.worker_ids() {
                let node = WorkerNode::new(
                    net.net_id,
                    worker,
                    spec,
                    net.history_steps,
                    master_seed,
                    config.learning_rate,
                    config.l2_lambda,
                )?;
                bus.register(node.endpoint());
                node_index.insert(node.endpoint(), nodes.len());
                nodes.push(node);
                ids.push(worker);
            }
            roster.insert(net.net_id, ids);
        }
        for p in &participants {
            if !node_index.contains_key(p) {
                return Err(Error::Topology(vec![format!(
                    "interconnection references unknown worker {}/{}",
                    p.0, p.1
                )]));
            }
        }

        let mut rng = seeded_rng(master_seed, DECODER_SEED_LABEL);
        let decoder = DecoderHead::new(&config.decoder, merged_dim, &mut rng)?;
        let dec_adam = AdamState::new(config.learning_rate);

        let store = GlobalEncoderStore::new(
            roster
                .iter()
                .map(|(&net, ids)| (net, nodes[node_index[&(net, ids[0])]].weights()))
                .collect(),
        );

        Ok(Cluster {
            config: config.clone(),
            master_seed,
            mode,
            timeout: Duration::from_secs(30),
            bus,
            coordinator,
            ics,
            participants,
            roster,
            history,
            nodes,
            node_index,
            decoder,
            dec_adam,
            store,
            last_reports: BTreeMap::new(),
        })
    }

    pub fn coordinator(&self) -> Endpoint {
        self.coordinator
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn mode(&self) -> SchedulerMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: SchedulerMode) {
        self.mode = mode;
    }

    /// Barrier timeout for the threaded scheduler.
    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    /// Snapshot of the bus's message accounting.
    pub fn meter(&self) -> MessageMeter {
        self.bus.meter()
    }

    pub fn store(&self) -> &GlobalEncoderStore {
        &self.store
    }

    pub fn roster(&self) -> &BTreeMap<NetId, Vec<WorkerId>> {
        &self.roster
    }

    /// Total live workers, `Σ_e K_e`.
    pub fn live_worker_count(&self) -> usize {
        self.roster.values().map(|ids| ids.len()).sum()
    }

    /// Workers named by interconnections (context contributors).
    pub fn participant_count(&self) -> usize {
        self.participants.len()
    }

    /// The reports that fed an entity's most recent aggregation.
    pub fn last_reports(&self, net: NetId) -> Option<&[(WorkerId, WeightSet)]> {
        self.last_reports.get(&net).map(|v| v.as_slice())
    }

    pub fn worker_weights(&self, net: NetId, worker: WorkerId) -> Result<WeightSet> {
        let idx = self
            .node_index
            .get(&(net, worker))
            .ok_or_else(|| Error::Protocol(format!("no worker {net}/{worker}")))?;
        Ok(self.nodes[*idx].weights())
    }

    /// Checkpoint-ready weights: each entity's global encoder under
    /// `net{e}/…` plus the decoder/head under `coordinator/…`.
    pub fn weights(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for net in self.store.nets() {
            for (name, tensor) in self.store.weights(net)? {
                out.insert(format!("{net}/{name}"), tensor.clone());
            }
        }
        for (name, p) in self.decoder.named_params() {
            out.insert(format!("coordinator/{name}"), p.clone());
        }
        Ok(out)
    }

    /// Provision a worker that joins entity `net` now: it receives the
    /// store's current weights for that entity bitwise (never a fresh
    /// random encoder), an empty optimizer, and a bus endpoint, and it is
    /// counted in every following aggregation. Interconnections are fixed
    /// per run, so a joiner holds no data partition and rides the loops
    /// idle until weights flow: it still reports and receives weights each
    /// loop, which is exactly what grows Eq-style averaging to `K_e + 1`.
    pub fn handle_join(&mut self, net: NetId) -> Result<Endpoint> {
        let ids = self
            .roster
            .get(&net)
            .ok_or_else(|| Error::InvalidConfig(format!("cannot join unknown entity {net}")))?;
        let new_id = WorkerId(ids.last().map_or(1, |w| w.0 + 1));
        let spec = self
            .config
            .encoders
            .get(&net)
            .ok_or_else(|| Error::InvalidConfig(format!("no encoder spec for {net}")))?;
        let history_steps = *self
            .history
            .get(&net)
            .ok_or_else(|| Error::Protocol(format!("{net} has no recorded window length")))?;
        let mut node = WorkerNode::new(
            net,
            new_id,
            spec,
            history_steps,
            self.master_seed,
            self.config.learning_rate,
            self.config.l2_lambda,
        )?;
        node.set_weights(self.store.weights(net)?)?;
        let endpoint = node.endpoint();
        self.bus.register(endpoint);
        self.node_index.insert(endpoint, self.nodes.len());
        self.nodes.push(node);
        self.roster.get_mut(&net).expect("checked above").push(new_id);
        Ok(endpoint)
    }

    /// Run Steps ①–⑨ for one batch plan over the shared sample table.
    pub fn run_batch_loop(
        &mut self,
        samples: &[TrainingSample],
        plan: &BatchPlan,
    ) -> Result<BatchOutcome> {
        if plan.sample_indices.is_empty() {
            return Err(Error::Dataset("empty batch plan".into()));
        }
        for &i in &plan.sample_indices {
            if i >= samples.len() {
                return Err(Error::Dataset(format!(
                    "batch plan references sample {i}, dataset has {}",
                    samples.len()
                )));
            }
        }
        let targets: Vec<&Tensor> = plan
            .sample_indices
            .iter()
            .map(|&i| &samples[i].target)
            .collect();
        let mut windows: BTreeMap<Endpoint, Vec<&Tensor>> = BTreeMap::new();
        for &ep in &self.participants {
            let mut per_worker = Vec::with_capacity(plan.sample_indices.len());
            for &i in &plan.sample_indices {
                per_worker.push(samples[i].windows.get(&ep).ok_or_else(|| {
                    Error::Dataset(format!("sample {i} has no window for {}/{}", ep.0, ep.1))
                })?);
            }
            windows.insert(ep, per_worker);
        }

        let trace = RoundTrace::new();
        let loss = match self.mode {
            SchedulerMode::Deterministic => {
                self.deterministic_loop(plan, &windows, &targets, &trace)?
            }
            SchedulerMode::Threaded => self.threaded_loop(plan, &windows, &targets, &trace)?,
        };
        let mut checksums = BTreeMap::new();
        for net in self.store.nets() {
            checksums.insert(net, weight_checksum(self.store.weights(net)?));
        }
        Ok(BatchOutcome {
            loss,
            trace: trace.into_events(),
            checksums,
        })
    }

    /// Single-threaded execution in fixed actor order; the reference
    /// schedule the equivalence oracle compares against.
    fn deterministic_loop(
        &mut self,
        plan: &BatchPlan,
        windows: &BTreeMap<Endpoint, Vec<&Tensor>>,
        targets: &[&Tensor],
        trace: &RoundTrace,
    ) -> Result<f64> {
        let coordinator = self.coordinator;
        let (epoch, batch) = (plan.epoch, plan.batch);
        let roster = self.roster.clone();

        // ① every participating worker encodes; all but the coordinator's
        // own upload over the bus.
        let mut contexts: BTreeMap<Endpoint, Tensor> = BTreeMap::new();
        for (&ep, wins) in windows {
            let matrix = self.nodes[self.node_index[&ep]].encode_training(wins)?;
            trace.record(ProtocolStep::CollectContexts, ep);
            if ep == coordinator {
                contexts.insert(ep, matrix);
            } else {
                self.bus.send(Envelope::new(
                    MsgType::ContextBatch,
                    epoch,
                    batch,
                    Phase::Contexts,
                    ep,
                    coordinator,
                    vec![(CONTEXTS_TENSOR.into(), matrix)],
                )?)?;
            }
        }
        let expected = windows.len() - usize::from(windows.contains_key(&coordinator));
        for _ in 0..expected {
            let env = self.bus.recv(coordinator)?;
            expect_kind(&env, MsgType::ContextBatch, Phase::Contexts, epoch, batch)?;
            let sender = env.sender;
            if contexts.insert(sender, payload_tensor(env)?).is_some() {
                return Err(Error::Protocol(format!(
                    "duplicate context batch from {}/{}",
                    sender.0, sender.1
                )));
            }
        }

        // ②–⑥ merge, forward, loss, backward, decoder update.
        let mut math = CoordinatorMath {
            decoder: &mut self.decoder,
            adam: &mut self.dec_adam,
            merge_fn: self.config.merge_fn,
            l2_lambda: self.config.l2_lambda,
        };
        let (loss, mut grad_mats) = math.forward_backward(&self.ics, &contexts, targets)?;
        trace.record(ProtocolStep::MergedForward, coordinator);
        trace.record(ProtocolStep::LossBackward, coordinator);

        // ⑦ one gradient envelope per live worker.
        for (&net, ids) in &roster {
            let width = self.config.encoders[&net].context_dim();
            for &worker in ids {
                let ep = (net, worker);
                let grads = grad_mats
                    .remove(&ep)
                    .unwrap_or_else(|| Tensor::zeros(&[targets.len(), width]));
                self.bus.send(Envelope::new(
                    MsgType::SliceGrad,
                    epoch,
                    batch,
                    Phase::GradReturn,
                    coordinator,
                    ep,
                    vec![(CONTEXT_GRADS_TENSOR.into(), grads)],
                )?)?;
            }
        }
        for (&net, ids) in &roster {
            for &worker in ids {
                let ep = (net, worker);
                let env = self.bus.recv(ep)?;
                expect_kind(&env, MsgType::SliceGrad, Phase::GradReturn, epoch, batch)?;
                let grads = payload_tensor(env)?;
                self.nodes[self.node_index[&ep]].apply_slice_grads(&grads)?;
                trace.record(ProtocolStep::GradBroadcast, ep);
            }
        }

        // ⑧ weight reports to each entity's aggregator (worker 1).
        for (&net, ids) in &roster {
            for &worker in ids {
                let ep = (net, worker);
                let report = self.nodes[self.node_index[&ep]].weights();
                trace.record(ProtocolStep::WeightReport, ep);
                self.bus.send(Envelope::new(
                    MsgType::WeightReport,
                    epoch,
                    batch,
                    Phase::WeightReport,
                    ep,
                    (net, WorkerId(1)),
                    report.into_iter().collect(),
                )?)?;
            }
        }
        for (&net, ids) in &roster {
            let agg_ep = (net, WorkerId(1));
            let mut reports: Vec<(WorkerId, WeightSet)> = Vec::with_capacity(ids.len());
            for _ in ids {
                let env = self.bus.recv(agg_ep)?;
                expect_kind(&env, MsgType::WeightReport, Phase::WeightReport, epoch, batch)?;
                if env.sender.0 != net {
                    return Err(Error::Protocol(format!(
                        "aggregator of {net} received a report from {}",
                        env.sender.0
                    )));
                }
                reports.push((env.sender.1, env.payload.into_iter().collect()));
            }
            let aggregate = aggregate_weights(&reports)?;
            self.last_reports.insert(net, reports);
            self.store.update(net, epoch, batch, aggregate.clone())?;
            trace.record(ProtocolStep::Aggregate, agg_ep);
            for &worker in ids {
                self.bus.send(Envelope::new(
                    MsgType::GlobalWeights,
                    epoch,
                    batch,
                    Phase::GlobalSync,
                    agg_ep,
                    (net, worker),
                    aggregate.clone().into_iter().collect(),
                )?)?;
            }
        }

        // ⑨ install the averaged weights everywhere.
        for (&net, ids) in &roster {
            for &worker in ids {
                let ep = (net, worker);
                let env = self.bus.recv(ep)?;
                expect_kind(&env, MsgType::GlobalWeights, Phase::GlobalSync, epoch, batch)?;
                let set: WeightSet = env.payload.into_iter().collect();
                self.nodes[self.node_index[&ep]].set_weights(&set)?;
                trace.record(ProtocolStep::GlobalBroadcast, ep);
            }
        }
        Ok(loss)
    }

    /// One thread per worker, synchronized purely by message availability;
    /// the coordinator runs on the calling thread. Ordered summation makes
    /// the numbers identical to the deterministic schedule.
    fn threaded_loop(
        &mut self,
        plan: &BatchPlan,
        windows: &BTreeMap<Endpoint, Vec<&Tensor>>,
        targets: &[&Tensor],
        trace: &RoundTrace,
    ) -> Result<f64> {
        let coordinator = self.coordinator;
        let (epoch, batch) = (plan.epoch, plan.batch);
        let roster = self.roster.clone();
        let s = targets.len();
        let ctx_dims: BTreeMap<NetId, usize> = roster
            .keys()
            .map(|&net| (net, self.config.encoders[&net].context_dim()))
            .collect();
        let merge_fn = self.config.merge_fn;
        let l2_lambda = self.config.l2_lambda;
        let timeout = self.timeout;

        let bus = &self.bus;
        let ics = &self.ics;
        let participants = &self.participants;
        let nodes = &mut self.nodes;
        let decoder = &mut self.decoder;
        let dec_adam = &mut self.dec_adam;

        let mut loss_out = 0.0;
        let mut agg_outcomes: Vec<(NetId, Vec<(WorkerId, WeightSet)>, WeightSet)> = Vec::new();

        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            let mut embedded: Option<&mut WorkerNode> = None;
            for node in nodes.iter_mut() {
                let ep = node.endpoint();
                if ep == coordinator {
                    embedded = Some(node);
                    continue;
                }
                let wins = windows.get(&ep).cloned();
                let agg_duty = if ep.1 == WorkerId(1) {
                    Some(roster[&ep.0].clone())
                } else {
                    None
                };
                handles.push(scope.spawn(move || {
                    worker_round(
                        bus,
                        node,
                        epoch,
                        batch,
                        wins.as_deref(),
                        coordinator,
                        timeout,
                        trace,
                        agg_duty,
                    )
                }));
            }
            let embedded =
                embedded.ok_or_else(|| Error::Protocol("coordinator worker missing".into()))?;

            // Coordinator duties: own encode (local shortcut), collect,
            // forward/backward, return gradient slices.
            let mut contexts: BTreeMap<Endpoint, Tensor> = BTreeMap::new();
            if let Some(wins) = windows.get(&coordinator) {
                contexts.insert(coordinator, embedded.encode_training(wins)?);
                trace.record(ProtocolStep::CollectContexts, coordinator);
            }
            let expected =
                participants.len() - usize::from(participants.contains(&coordinator));
            for _ in 0..expected {
                let env = bus.recv_timeout(coordinator, timeout)?;
                expect_kind(&env, MsgType::ContextBatch, Phase::Contexts, epoch, batch)?;
                let sender = env.sender;
                if contexts.insert(sender, payload_tensor(env)?).is_some() {
                    return Err(Error::Protocol(format!(
                        "duplicate context batch from {}/{}",
                        sender.0, sender.1
                    )));
                }
            }
            let mut math = CoordinatorMath {
                decoder,
                adam: dec_adam,
                merge_fn,
                l2_lambda,
            };
            let (loss, mut grad_mats) = math.forward_backward(ics, &contexts, targets)?;
            trace.record(ProtocolStep::MergedForward, coordinator);
            trace.record(ProtocolStep::LossBackward, coordinator);
            for (&net, ids) in &roster {
                for &worker in ids {
                    let ep = (net, worker);
                    let grads = grad_mats
                        .remove(&ep)
                        .unwrap_or_else(|| Tensor::zeros(&[s, ctx_dims[&net]]));
                    bus.send(Envelope::new(
                        MsgType::SliceGrad,
                        epoch,
                        batch,
                        Phase::GradReturn,
                        coordinator,
                        ep,
                        vec![(CONTEXT_GRADS_TENSOR.into(), grads)],
                    )?)?;
                }
            }
            // Its own worker + aggregator duties (contexts already sent).
            let own = worker_round(
                bus,
                embedded,
                epoch,
                batch,
                None,
                coordinator,
                timeout,
                trace,
                Some(roster[&coordinator.0].clone()),
            )?;
            if let Some(out) = own {
                agg_outcomes.push(out);
            }
            loss_out = loss;

            for handle in handles {
                match handle.join() {
                    Ok(result) => {
                        if let Some(out) = result? {
                            agg_outcomes.push(out);
                        }
                    }
                    Err(panic) => std::panic::resume_unwind(panic),
                }
            }
            Ok(())
        })?;

        for (net, reports, aggregate) in agg_outcomes {
            self.last_reports.insert(net, reports);
            self.store.update(net, epoch, batch, aggregate)?;
        }
        Ok(loss_out)
    }

    /// Mean MSE over `samples × interconnections`, computed over the bus in
    /// inference-only rounds (distinct message phase, so training counts
    /// stay exact). Chunking bounds memory; the pooled mean is chunk-size
    /// independent.
    pub fn validation_mse(
        &self,
        samples: &[TrainingSample],
        epoch: u64,
        chunk_size: usize,
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Dataset("validation set is empty".into()));
        }
        if chunk_size == 0 {
            return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
        }
        let coordinator = self.coordinator;
        let mut total = 0.0;
        let mut count = 0usize;
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        for (chunk_idx, chunk) in refs.chunks(chunk_size).enumerate() {
            let batch = chunk_idx as u64;
            let mut contexts: BTreeMap<Endpoint, Tensor> = BTreeMap::new();
            for &ep in &self.participants {
                let wins: Vec<&Tensor> = chunk
                    .iter()
                    .map(|sample| {
                        sample.windows.get(&ep).ok_or_else(|| {
                            Error::Dataset(format!(
                                "validation sample has no window for {}/{}",
                                ep.0, ep.1
                            ))
                        })
                    })
                    .collect::<Result<_>>()?;
                let matrix = self.nodes[self.node_index[&ep]].encode_inference(&wins)?;
                if ep == coordinator {
                    contexts.insert(ep, matrix);
                } else {
                    self.bus.send(Envelope::new(
                        MsgType::ContextBatch,
                        epoch,
                        batch,
                        Phase::Validation,
                        ep,
                        coordinator,
                        vec![(CONTEXTS_TENSOR.into(), matrix)],
                    )?)?;
                }
            }
            let expected =
                self.participants.len() - usize::from(self.participants.contains(&coordinator));
            for _ in 0..expected {
                let env = self.bus.recv(coordinator)?;
                expect_kind(&env, MsgType::ContextBatch, Phase::Validation, epoch, batch)?;
                let sender = env.sender;
                contexts.insert(sender, payload_tensor(env)?);
            }
            let chunk_targets: Vec<&Tensor> = chunk.iter().map(|sample| &sample.target).collect();
            let (t, c) = validate_chunk(
                &self.decoder,
                self.config.merge_fn,
                &self.ics,
                &contexts,
                &chunk_targets,
            )?;
            total += t;
            count += c;
        }
        Ok(total / count as f64)
    }

    /// Offline inference for one sample: `(interconnection id, prediction)`
    /// pairs in id order, straight through the local components.
    pub fn predict(&self, sample: &TrainingSample) -> Result<Vec<(u32, Tensor)>> {
        let contexts = self.contexts_for(sample)?;
        self.predict_from_contexts(&contexts, sample.anchor)
    }

    /// Encode one sample on every participating worker: the per-worker
    /// context rows, ready to merge locally or ship to a remote
    /// coordinator. Only these vectors — never windows — leave a worker.
    pub fn contexts_for(&self, sample: &TrainingSample) -> Result<BTreeMap<Endpoint, Tensor>> {
        let mut contexts = BTreeMap::new();
        for &ep in &self.participants {
            let window = sample.windows.get(&ep).ok_or_else(|| {
                Error::Dataset(format!("sample has no window for {}/{}", ep.0, ep.1))
            })?;
            let matrix = self.nodes[self.node_index[&ep]].encode_inference(&[window])?;
            contexts.insert(ep, matrix.row_tensor(0));
        }
        Ok(contexts)
    }

    /// The coordinator half of inference: merge the supplied per-worker
    /// context rows for each interconnection and decode. Works with
    /// contexts produced locally by [`Cluster::contexts_for`] or received
    /// over a byte stream.
    pub fn predict_from_contexts(
        &self,
        contexts: &BTreeMap<Endpoint, Tensor>,
        timestep: u64,
    ) -> Result<Vec<(u32, Tensor)>> {
        let mut out = Vec::with_capacity(self.ics.len());
        for ic in &self.ics {
            let mut ctx_list = Vec::with_capacity(ic.members.len());
            for &(net, worker) in &ic.members {
                let values = contexts.get(&(net, worker)).ok_or_else(|| {
                    Error::Protocol(format!(
                        "interconnection {} is missing the context of {net}/{worker}",
                        ic.id
                    ))
                })?;
                ctx_list.push(ContextVector {
                    values: values.clone(),
                    net_id: net,
                    worker_id: worker,
                    timestep,
                });
            }
            let merged = merge(&ctx_list, self.config.merge_fn, &ic.nets, ic.id, timestep)?;
            out.push((ic.id, self.decoder.forward_inference(&merged.values)?));
        }
        Ok(out)
    }

    /// Overwrite every actor's weights from a flat checkpoint map
    /// (`net{e}/…` for encoders, `coordinator/…` for the decoder/head), as
    /// written by [`Cluster::weights`]. Every entity and every decoder
    /// parameter must be covered, and no tensor may be left over. Optimizer
    /// state is not part of a checkpoint; a restored deployment continues
    /// with whatever optimizer state it already has (fresh, on a newly
    /// built cluster).
    pub fn restore(&mut self, weights: &BTreeMap<String, Tensor>) -> Result<()> {
        let by_display: BTreeMap<String, NetId> =
            self.roster.keys().map(|&n| (n.to_string(), n)).collect();
        let mut per_net: BTreeMap<NetId, WeightSet> =
            self.roster.keys().map(|&n| (n, WeightSet::new())).collect();
        let mut dec_set = WeightSet::new();
        for (name, tensor) in weights {
            let Some((prefix, rest)) = name.split_once('/') else {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint tensor {name:?} has no actor prefix"
                )));
            };
            if prefix == "coordinator" {
                dec_set.insert(rest.to_string(), tensor.clone());
            } else if let Some(&net) = by_display.get(prefix) {
                per_net
                    .get_mut(&net)
                    .expect("seeded from the same roster")
                    .insert(rest.to_string(), tensor.clone());
            } else {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint tensor {name:?} names no actor in this deployment"
                )));
            }
        }
        for (net, set) in &per_net {
            if set.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint holds no tensors for {net}"
                )));
            }
        }

        // Decoder/head: strict bitwise copy, same rules as worker weights.
        let mut applied = 0usize;
        let mut failure: Option<Error> = None;
        self.decoder.for_each_param(&mut |name, p| {
            if failure.is_some() {
                return;
            }
            match dec_set.get(&name) {
                Some(t) if t.shape() == p.shape() => {
                    *p = t.clone();
                    applied += 1;
                }
                Some(t) => {
                    failure = Some(Error::ShapeMismatch {
                        context: "Cluster::restore",
                        expected: p.shape().to_vec(),
                        got: t.shape().to_vec(),
                    });
                }
                None => {
                    failure = Some(Error::InvalidConfig(format!(
                        "checkpoint is missing coordinator tensor {name:?}"
                    )));
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if applied != dec_set.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint carries {} coordinator tensors, the decoder/head has {applied}",
                dec_set.len()
            )));
        }

        for node in &mut self.nodes {
            node.set_weights(&per_net[&node.endpoint().0])?;
        }
        self.store = GlobalEncoderStore::new(per_net);
        self.last_reports.clear();
        Ok(())
    }
}

/// Everything a non-coordinating worker does in one batch loop; also run by
/// the coordinator for its embedded worker (with `windows: None`, since its
/// contexts never cross the bus). Returns the aggregation outcome when this
/// worker carries its entity's aggregator duty.
#[allow(clippy::too_many_arguments)]
fn worker_round(
    bus: &InProcessBus,
    node: &mut WorkerNode,
    epoch: u64,
    batch: u64,
    windows: Option<&[&Tensor]>,
    coordinator: Endpoint,
    timeout: Duration,
    trace: &RoundTrace,
    aggregate_for: Option<Vec<WorkerId>>,
) -> Result<Option<(NetId, Vec<(WorkerId, WeightSet)>, WeightSet)>> {
    let ep = node.endpoint();
    if let Some(wins) = windows {
        let matrix = node.encode_training(wins)?;
        trace.record(ProtocolStep::CollectContexts, ep);
        bus.send(Envelope::new(
            MsgType::ContextBatch,
            epoch,
            batch,
            Phase::Contexts,
            ep,
            coordinator,
            vec![(CONTEXTS_TENSOR.into(), matrix)],
        )?)?;
    }

    let env = bus.recv_timeout(ep, timeout)?;
    expect_kind(&env, MsgType::SliceGrad, Phase::GradReturn, epoch, batch)?;
    let grads = payload_tensor(env)?;
    node.apply_slice_grads(&grads)?;
    trace.record(ProtocolStep::GradBroadcast, ep);

    trace.record(ProtocolStep::WeightReport, ep);
    bus.send(Envelope::new(
        MsgType::WeightReport,
        epoch,
        batch,
        Phase::WeightReport,
        ep,
        (ep.0, WorkerId(1)),
        node.weights().into_iter().collect(),
    )?)?;

    let agg_out = if let Some(members) = aggregate_for {
        let mut reports: Vec<(WorkerId, WeightSet)> = Vec::with_capacity(members.len());
        for _ in &members {
            let env = bus.recv_timeout(ep, timeout)?;
            expect_kind(&env, MsgType::WeightReport, Phase::WeightReport, epoch, batch)?;
            if env.sender.0 != ep.0 {
                return Err(Error::Protocol(format!(
                    "aggregator of {} received a report from {}",
                    ep.0, env.sender.0
                )));
            }
            reports.push((env.sender.1, env.payload.into_iter().collect()));
        }
        let aggregate = aggregate_weights(&reports)?;
        trace.record(ProtocolStep::Aggregate, ep);
        for &worker in &members {
            bus.send(Envelope::new(
                MsgType::GlobalWeights,
                epoch,
                batch,
                Phase::GlobalSync,
                ep,
                (ep.0, worker),
                aggregate.clone().into_iter().collect(),
            )?)?;
        }
        Some((ep.0, reports, aggregate))
    } else {
        None
    };

    let env = bus.recv_timeout(ep, timeout)?;
    expect_kind(&env, MsgType::GlobalWeights, Phase::GlobalSync, epoch, batch)?;
    let set: WeightSet = env.payload.into_iter().collect();
    node.set_weights(&set)?;
    trace.record(ProtocolStep::GlobalBroadcast, ep);
    Ok(agg_out)
}

fn expect_kind(
    env: &Envelope,
    msg_type: MsgType,
    phase: Phase,
    epoch: u64,
    batch: u64,
) -> Result<()> {
    if env.msg_type != msg_type || env.phase != phase || env.epoch != epoch || env.batch != batch {
        return Err(Error::Protocol(format!(
            "expected {msg_type:?} ({phase:?}) for loop {epoch}/{batch}, got {:?} ({:?}) for \
             {}/{} from {}/{}",
            env.msg_type, env.phase, env.epoch, env.batch, env.sender.0, env.sender.1
        )));
    }
    Ok(())
}

fn payload_tensor(env: Envelope) -> Result<Tensor> {
    let count = env.payload.len();
    let mut tensors = env.payload.into_iter();
    match (tensors.next(), count) {
        (Some((_, tensor)), 1) => Ok(tensor),
        _ => Err(Error::Protocol(format!(
            "expected exactly one payload tensor, got {count}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_centralized_monolith;
    use crate::model::testkit::{tiny_config, tiny_samples, tiny_topology};
    use crate::protocol::epoch_plan;

    fn batch_of(samples: &[TrainingSample], plan: &BatchPlan) -> Vec<TrainingSample> {
        plan.sample_indices.iter().map(|&i| samples[i].clone()).collect()
    }

    #[test]
    fn one_worker_per_entity_matches_the_centralized_monolith() {
        let topo = tiny_topology(&[1, 1]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 12, 17);
        let mut monolith = build_centralized_monolith(&cfg, &topo, 42).unwrap();
        let mut cluster = Cluster::new(&cfg, &topo, 42, SchedulerMode::Deterministic).unwrap();
        for epoch in 0..5u64 {
            for plan in epoch_plan(42, epoch, samples.len(), 4).unwrap() {
                let mono_loss = monolith.train_batch(&batch_of(&samples, &plan)).unwrap();
                let outcome = cluster.run_batch_loop(&samples, &plan).unwrap();
                assert!(
                    (outcome.loss - mono_loss).abs() <= 1e-9,
                    "epoch {epoch} batch {}: {} vs {mono_loss}",
                    plan.batch,
                    outcome.loss
                );
            }
        }
        let mono_w = monolith.weights();
        let dist_w = cluster.weights().unwrap();
        assert_eq!(
            mono_w.keys().collect::<Vec<_>>(),
            dist_w.keys().collect::<Vec<_>>()
        );
        for (name, t) in &mono_w {
            let d = &dist_w[name];
            assert_eq!(t.shape(), d.shape(), "{name}");
            for (a, b) in t.data().iter().zip(d.data()) {
                assert!((a - b).abs() <= 1e-9, "{name}: {a} vs {b}");
            }
        }
        let mono_val = monolith.validation_mse(&samples).unwrap();
        let dist_val = cluster.validation_mse(&samples, 99, 5).unwrap();
        assert!(
            (mono_val - dist_val).abs() <= 1e-9,
            "{mono_val} vs {dist_val}"
        );
    }

    #[test]
    fn every_loop_leaves_each_entity_bitwise_synchronized() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 6, 23);
        let mut cluster = Cluster::new(&cfg, &topo, 7, SchedulerMode::Deterministic).unwrap();
        for plan in epoch_plan(7, 0, samples.len(), 3).unwrap() {
            let outcome = cluster.run_batch_loop(&samples, &plan).unwrap();
            for (&net, ids) in cluster.roster().clone().iter() {
                let global = cluster.store().weights(net).unwrap().clone();
                for &w in ids {
                    assert_eq!(
                        cluster.worker_weights(net, w).unwrap(),
                        global,
                        "{net}/{w} diverged after loop {}",
                        plan.batch
                    );
                }
                assert_eq!(outcome.checksums[&net], weight_checksum(&global));
            }
        }
    }

    #[test]
    fn workers_with_identical_data_take_identical_steps() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let mut samples = tiny_samples(&topo, 4, 31);
        for s in &mut samples {
            let w = s.windows[&(NetId(2), WorkerId(1))].clone();
            s.windows.insert((NetId(2), WorkerId(2)), w);
        }
        let mut cluster = Cluster::new(&cfg, &topo, 3, SchedulerMode::Deterministic).unwrap();
        let plan = BatchPlan {
            epoch: 0,
            batch: 0,
            sample_indices: (0..samples.len()).collect(),
        };
        cluster.run_batch_loop(&samples, &plan).unwrap();
        let reports = cluster.last_reports(NetId(2)).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(
            reports[0].1, reports[1].1,
            "same data and same start must give the same step"
        );
        assert_eq!(cluster.store().weights(NetId(2)).unwrap(), &reports[0].1);
    }

    #[test]
    fn aggregation_on_the_bus_matches_a_hand_computed_mean() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 4, 37);
        let mut cluster = Cluster::new(&cfg, &topo, 11, SchedulerMode::Deterministic).unwrap();
        let plan = BatchPlan {
            epoch: 0,
            batch: 0,
            sample_indices: (0..samples.len()).collect(),
        };
        cluster.run_batch_loop(&samples, &plan).unwrap();
        let reports = cluster.last_reports(NetId(2)).unwrap();
        assert_eq!(reports.len(), 2);
        assert_ne!(
            reports[0].1, reports[1].1,
            "distinct partitions should give distinct reports"
        );
        let global = cluster.store().weights(NetId(2)).unwrap();
        for (name, tensor) in global {
            for idx in 0..tensor.len() {
                let mean = reports
                    .iter()
                    .map(|(_, set)| set[name].data()[idx])
                    .sum::<f64>()
                    / reports.len() as f64;
                assert!(
                    (tensor.data()[idx] - mean).abs() <= 1e-15,
                    "{name}[{idx}]: {} vs {mean}",
                    tensor.data()[idx]
                );
            }
        }
    }

    #[test]
    fn message_budget_per_loop_is_exact() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 2);
        let samples = tiny_samples(&topo, 4, 11);
        let mut cluster = Cluster::new(&cfg, &topo, 5, SchedulerMode::Deterministic).unwrap();
        assert_eq!(cluster.live_worker_count(), 3);
        assert_eq!(cluster.participant_count(), 3);
        for (epoch, batch) in [(0u64, 0u64), (0, 1), (1, 0)] {
            let plan = BatchPlan {
                epoch,
                batch,
                sample_indices: vec![0, 1, 2, 3],
            };
            cluster.run_batch_loop(&samples, &plan).unwrap();
            let meter = cluster.meter();
            assert_eq!(meter.count(epoch, batch, Phase::Contexts), 2);
            assert_eq!(meter.count(epoch, batch, Phase::GradReturn), 3);
            assert_eq!(meter.count(epoch, batch, Phase::WeightReport), 3);
            assert_eq!(meter.count(epoch, batch, Phase::GlobalSync), 3);
            assert_eq!(meter.count(epoch, batch, Phase::Validation), 0);
        }
        assert_eq!(cluster.meter().violations(), 0);
    }

    #[test]
    fn threaded_and_deterministic_schedules_agree_bitwise() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 8, 41);
        let mut det = Cluster::new(&cfg, &topo, 13, SchedulerMode::Deterministic).unwrap();
        let mut thr = Cluster::new(&cfg, &topo, 13, SchedulerMode::Threaded).unwrap();
        thr.set_timeout(Duration::from_secs(10));
        for epoch in 0..2u64 {
            for plan in epoch_plan(13, epoch, samples.len(), 4).unwrap() {
                let a = det.run_batch_loop(&samples, &plan).unwrap();
                let b = thr.run_batch_loop(&samples, &plan).unwrap();
                assert_eq!(
                    a.loss.to_bits(),
                    b.loss.to_bits(),
                    "epoch {epoch} batch {}: {} vs {}",
                    plan.batch,
                    a.loss,
                    b.loss
                );
                assert_eq!(a.checksums, b.checksums);
            }
        }
        for (&net, ids) in det.roster().clone().iter() {
            for &w in ids {
                assert_eq!(
                    det.worker_weights(net, w).unwrap(),
                    thr.worker_weights(net, w).unwrap()
                );
            }
        }
        assert_eq!(det.weights().unwrap(), thr.weights().unwrap());
    }

    #[test]
    fn gradients_flow_only_after_the_coordinator_backward() {
        for mode in [SchedulerMode::Deterministic, SchedulerMode::Threaded] {
            let topo = tiny_topology(&[1, 2]);
            let cfg = tiny_config(&topo, 2);
            let samples = tiny_samples(&topo, 4, 19);
            let mut cluster = Cluster::new(&cfg, &topo, 29, mode).unwrap();
            cluster.set_timeout(Duration::from_secs(10));
            let plan = BatchPlan {
                epoch: 0,
                batch: 0,
                sample_indices: vec![0, 1, 2, 3],
            };
            let outcome = cluster.run_batch_loop(&samples, &plan).unwrap();
            let trace = &outcome.trace;
            let fwd = trace
                .iter()
                .position(|e| e.step == ProtocolStep::MergedForward)
                .unwrap();
            let backward = trace
                .iter()
                .position(|e| e.step == ProtocolStep::LossBackward)
                .unwrap();
            assert!(fwd < backward);
            for (i, event) in trace.iter().enumerate() {
                match event.step {
                    ProtocolStep::CollectContexts => {
                        assert!(i < fwd, "{mode:?}: encode after merge in {event:?}")
                    }
                    ProtocolStep::GradBroadcast => {
                        assert!(i > backward, "{mode:?}: gradient before backward in {event:?}")
                    }
                    _ => {}
                }
            }
            for &net in cluster.roster().clone().keys() {
                let agg = trace
                    .iter()
                    .position(|e| e.step == ProtocolStep::Aggregate && e.net == net)
                    .unwrap();
                for (i, event) in trace.iter().enumerate() {
                    if event.net != net {
                        continue;
                    }
                    match event.step {
                        ProtocolStep::WeightReport => assert!(i < agg, "{mode:?}: {event:?}"),
                        ProtocolStep::GlobalBroadcast => assert!(i > agg, "{mode:?}: {event:?}"),
                        _ => {}
                    }
                }
            }
        }
    }

    #[test]
    fn joiners_inherit_global_weights_and_grow_the_divisor() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 4, 3);

        // Joining before any training hands out the seeded initial weights.
        let mut fresh = Cluster::new(&cfg, &topo, 19, SchedulerMode::Deterministic).unwrap();
        let early = fresh.handle_join(NetId(2)).unwrap();
        assert_eq!(early, (NetId(2), WorkerId(3)));
        assert_eq!(
            fresh.worker_weights(NetId(2), WorkerId(3)).unwrap(),
            fresh.worker_weights(NetId(2), WorkerId(1)).unwrap(),
        );

        // Train one loop, then join: the newcomer gets the post-loop global
        // weights bitwise and the next aggregation averages three reports.
        let mut cluster = Cluster::new(&cfg, &topo, 19, SchedulerMode::Deterministic).unwrap();
        let plan0 = BatchPlan {
            epoch: 0,
            batch: 0,
            sample_indices: vec![0, 1, 2, 3],
        };
        cluster.run_batch_loop(&samples, &plan0).unwrap();
        let snapshot = cluster.store().weights(NetId(2)).unwrap().clone();
        let joined = cluster.handle_join(NetId(2)).unwrap();
        assert_eq!(joined, (NetId(2), WorkerId(3)));
        assert_eq!(
            cluster.worker_weights(NetId(2), WorkerId(3)).unwrap(),
            snapshot
        );
        assert_eq!(cluster.live_worker_count(), 4);
        assert_eq!(cluster.participant_count(), 3, "interconnections are fixed");

        let plan1 = BatchPlan {
            epoch: 0,
            batch: 1,
            sample_indices: vec![0, 1, 2, 3],
        };
        cluster.run_batch_loop(&samples, &plan1).unwrap();
        let reports = cluster.last_reports(NetId(2)).unwrap();
        assert_eq!(reports.len(), 3, "the joiner reports too");
        let global = cluster.store().weights(NetId(2)).unwrap();
        for (name, tensor) in global {
            for idx in 0..tensor.len() {
                let mean = reports
                    .iter()
                    .map(|(_, set)| set[name].data()[idx])
                    .sum::<f64>()
                    / 3.0;
                assert!((tensor.data()[idx] - mean).abs() <= 1e-15, "{name}[{idx}]");
            }
        }
        // The joiner holds no data, so context uploads stay at two, while
        // the weight flows all count four workers now.
        let meter = cluster.meter();
        assert_eq!(meter.count(0, 1, Phase::Contexts), 2);
        assert_eq!(meter.count(0, 1, Phase::GradReturn), 4);
        assert_eq!(meter.count(0, 1, Phase::WeightReport), 4);
        assert_eq!(meter.count(0, 1, Phase::GlobalSync), 4);
        for w in [WorkerId(1), WorkerId(2), WorkerId(3)] {
            assert_eq!(&cluster.worker_weights(NetId(2), w).unwrap(), global);
        }
    }

    #[test]
    fn validation_rounds_ride_their_own_phase() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 2);
        let samples = tiny_samples(&topo, 7, 29);
        let mut cluster = Cluster::new(&cfg, &topo, 2, SchedulerMode::Deterministic).unwrap();
        let plan = BatchPlan {
            epoch: 0,
            batch: 0,
            sample_indices: (0..samples.len()).collect(),
        };
        cluster.run_batch_loop(&samples, &plan).unwrap();
        let chunked = cluster.validation_mse(&samples, 0, 3).unwrap();
        let whole = cluster.validation_mse(&samples, 0, 100).unwrap();
        assert!(
            (chunked - whole).abs() <= 1e-12,
            "pooling must be chunk-size independent: {chunked} vs {whole}"
        );
        let meter = cluster.meter();
        assert_eq!(
            meter.count(0, 0, Phase::Contexts),
            2,
            "training counts must not absorb validation traffic"
        );
        assert!(meter.phase_total(Phase::Validation) > 0);
        assert_eq!(meter.violations(), 0);
    }

    #[test]
    fn checkpoints_restore_into_a_fresh_deployment() {
        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 10, 31);
        let mut trained = Cluster::new(&cfg, &topo, 42, SchedulerMode::Deterministic).unwrap();
        for plan in epoch_plan(42, 0, samples.len(), 5).unwrap() {
            trained.run_batch_loop(&samples, &plan).unwrap();
        }
        let snapshot = trained.weights().unwrap();

        // A different master seed guarantees the fresh deployment starts
        // from different weights, so equality below proves the restore.
        let mut fresh = Cluster::new(&cfg, &topo, 7, SchedulerMode::Deterministic).unwrap();
        assert_ne!(fresh.weights().unwrap(), snapshot);
        fresh.restore(&snapshot).unwrap();
        assert_eq!(fresh.weights().unwrap(), snapshot);
        for (&net, ids) in fresh.roster() {
            for &worker in ids {
                assert_eq!(
                    fresh.worker_weights(net, worker).unwrap(),
                    *fresh.store().weights(net).unwrap(),
                    "{net}/{worker} out of sync after restore"
                );
            }
        }
        let (a, b) = (
            trained.predict(&samples[0]).unwrap(),
            fresh.predict(&samples[0]).unwrap(),
        );
        assert_eq!(a, b, "restored deployment must predict identically");
    }

    #[test]
    fn restores_with_missing_or_foreign_tensors_are_rejected() {
        let topo = tiny_topology(&[1, 1]);
        let cfg = tiny_config(&topo, 2);
        let mut cluster = Cluster::new(&cfg, &topo, 3, SchedulerMode::Deterministic).unwrap();
        let good = cluster.weights().unwrap();

        let mut missing_net = good.clone();
        missing_net.retain(|name, _| !name.starts_with("net2/"));
        assert!(cluster.restore(&missing_net).is_err());

        let mut missing_dec = good.clone();
        let dec_name = missing_dec
            .keys()
            .find(|n| n.starts_with("coordinator/"))
            .unwrap()
            .clone();
        missing_dec.remove(&dec_name);
        assert!(cluster.restore(&missing_dec).is_err());

        let mut foreign = good.clone();
        foreign.insert("net9/ghost".into(), Tensor::zeros(&[1]));
        assert!(cluster.restore(&foreign).is_err());

        let mut unprefixed = good.clone();
        unprefixed.insert("dangling".into(), Tensor::zeros(&[1]));
        assert!(cluster.restore(&unprefixed).is_err());

        // The good snapshot still applies cleanly after all the rejections.
        cluster.restore(&good).unwrap();
        assert_eq!(cluster.weights().unwrap(), good);
    }

    #[test]
    fn contexts_shipped_through_the_wire_codec_predict_identically() {
        use crate::transport::{decode_frame, encode_frame};

        let topo = tiny_topology(&[1, 2]);
        let cfg = tiny_config(&topo, 3);
        let samples = tiny_samples(&topo, 4, 53);
        let mut cluster = Cluster::new(&cfg, &topo, 21, SchedulerMode::Deterministic).unwrap();
        for plan in epoch_plan(21, 0, samples.len(), 4).unwrap() {
            cluster.run_batch_loop(&samples, &plan).unwrap();
        }

        for sample in &samples {
            let local = cluster.predict(sample).unwrap();

            // Round-trip the context rows through the byte-stream codec the
            // way a remote coordinator would receive them.
            let contexts = cluster.contexts_for(sample).unwrap();
            let payload: Vec<(String, Tensor)> = contexts
                .iter()
                .map(|(&(net, worker), values)| {
                    (format!("context/{net}/{worker}"), values.clone())
                })
                .collect();
            let env = Envelope::new(
                MsgType::Control,
                0,
                0,
                Phase::Control,
                (NetId(1), WorkerId(1)),
                cluster.coordinator(),
                payload,
            )
            .unwrap();
            let decoded = decode_frame(&encode_frame(&env).unwrap()).unwrap();
            let mut received = BTreeMap::new();
            for (name, tensor) in decoded.payload {
                let mut parts = name.split('/').skip(1);
                let net: u32 = parts.next().unwrap()["net".len()..].parse().unwrap();
                let worker: u32 = parts.next().unwrap()["worker".len()..].parse().unwrap();
                received.insert((NetId(net), WorkerId(worker)), tensor);
            }
            let remote = cluster
                .predict_from_contexts(&received, sample.anchor)
                .unwrap();
            assert_eq!(local, remote, "wire transit must not perturb predictions");
        }
    }

    #[test]
    fn batch_plans_must_reference_real_samples() {
        let topo = tiny_topology(&[1, 1]);
        let cfg = tiny_config(&topo, 2);
        let samples = tiny_samples(&topo, 2, 1);
        let mut cluster = Cluster::new(&cfg, &topo, 1, SchedulerMode::Deterministic).unwrap();
        let plan = BatchPlan {
            epoch: 0,
            batch: 0,
            sample_indices: vec![0, 99],
        };
        assert!(matches!(
            cluster.run_batch_loop(&samples, &plan),
            Err(Error::Dataset(_))
        ));
    }
}
