//! Network entities, workers, roles, interconnections, and timing.
//!
//! A NET is one entity class of the deployment (vehicle fleet, base station,
//! edge host). Each NET runs one or more workers with identical encoder
//! architectures over the same feature schema. Exactly one NET is active —
//! it holds the groundtruth KPI and acts as the coordinator — all others are
//! passive. An interconnection picks one worker from each participating NET;
//! the merged context of an interconnection is what the decoder consumes.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

/// 1-based NET identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NetId(pub u32);

/// 1-based worker identifier, unique within its NET.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WorkerId(pub u32);

impl fmt::Display for NetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "net{}", self.0)
    }
}

impl fmt::Display for WorkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "worker{}", self.0)
    }
}

/// Whether a NET holds the groundtruth KPI (active) or only features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Active,
    Passive,
}

/// One entity class and its sampling/encoding parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetDescriptor {
    pub net_id: NetId,
    pub name: String,
    pub role: Role,
    /// Logging period τ between consecutive feature samples, in ms.
    pub logging_period_ms: u64,
    /// History window length in samples.
    pub history_steps: usize,
    /// Feature column names, fixed order, shared by all workers of the NET.
    pub features: Vec<String>,
    /// Number of workers in this NET.
    pub worker_count: usize,
}

impl NetDescriptor {
    /// History extent in ms: `history_steps · logging_period_ms`.
    pub fn history_extent_ms(&self) -> u64 {
        self.history_steps as u64 * self.logging_period_ms
    }

    pub fn worker_ids(&self) -> impl Iterator<Item = WorkerId> {
        (1..=self.worker_count as u32).map(WorkerId)
    }
}

/// One worker: a data partition bound to a NET's encoder architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkerDescriptor {
    pub net_id: NetId,
    pub worker_id: WorkerId,
    /// Label of the dataset partition this worker trains on.
    pub partition: String,
}

/// A merging group: one worker from each participating NET.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Interconnection {
    pub id: u32,
    /// net_id → the one member worker of that NET.
    pub members: BTreeMap<NetId, WorkerId>,
}

/// Global clocking of encode and prediction steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimingPlan {
    /// Interval between consecutive encode steps, in ms. Must cover the
    /// slowest logger: `encode_step_ms ≥ max logging_period_ms`.
    pub encode_step_ms: u64,
    /// Interval between consecutive predicted KPI values, in ms.
    pub prediction_step_ms: u64,
    /// Number of future KPI values predicted per window.
    pub horizon_steps: usize,
}

impl TimingPlan {
    /// Total prediction horizon in ms: `horizon_steps · prediction_step_ms`.
    pub fn horizon_ms(&self) -> u64 {
        self.horizon_steps as u64 * self.prediction_step_ms
    }
}

/// Validated deployment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Topology {
    pub nets: Vec<NetDescriptor>,
    pub interconnections: Vec<Interconnection>,
    pub timing: TimingPlan,
}

/// Outcome of role assignment: coordinator, per-NET role, and the local
/// aggregator worker of each NET.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleTable {
    pub coordinator: NetId,
    pub roles: BTreeMap<NetId, Role>,
    /// Local aggregator per NET, co-located with that NET's first worker.
    pub aggregators: BTreeMap<NetId, WorkerId>,
}

impl Topology {
    /// Check every structural rule; returns advisory warnings on success and
    /// the complete violation list on failure.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut errors = Vec::new();
        let mut warnings = Vec::new();

        if self.nets.is_empty() {
            errors.push("no NETs declared".to_string());
        }
        let mut seen = BTreeSet::new();
        for net in &self.nets {
            if !seen.insert(net.net_id) {
                errors.push(format!("duplicate NET id {}", net.net_id));
            }
            if net.worker_count == 0 {
                errors.push(format!("{} declares zero workers", net.net_id));
            }
            if net.history_steps == 0 {
                errors.push(format!("{} has zero history steps", net.net_id));
            }
            if net.logging_period_ms == 0 {
                errors.push(format!("{} has zero logging period", net.net_id));
            }
            if net.features.is_empty() {
                errors.push(format!("{} declares no features", net.net_id));
            }
        }

        let active: Vec<NetId> = self
            .nets
            .iter()
            .filter(|n| n.role == Role::Active)
            .map(|n| n.net_id)
            .collect();
        match active.len() {
            0 => errors.push("no active NET: exactly one NET must hold the groundtruth".into()),
            1 => {}
            _ => errors.push(format!(
                "multiple active NETs ({}): only one NET can be active",
                active
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )),
        }

        let max_logging = self.nets.iter().map(|n| n.logging_period_ms).max().unwrap_or(0);
        if self.timing.encode_step_ms < max_logging {
            errors.push(format!(
                "encode step {} ms below the slowest logging period {} ms",
                self.timing.encode_step_ms, max_logging
            ));
        }
        if self.timing.horizon_steps == 0 {
            errors.push("zero horizon steps".into());
        }
        if self.timing.prediction_step_ms == 0 {
            errors.push("zero prediction step".into());
        }

        if self.interconnections.is_empty() {
            errors.push("no interconnections declared".into());
        }
        let mut ic_ids = BTreeSet::new();
        let coordinator = active.first().copied();
        let mut used_workers: BTreeSet<(NetId, WorkerId)> = BTreeSet::new();
        for ic in &self.interconnections {
            if !ic_ids.insert(ic.id) {
                errors.push(format!("duplicate interconnection id {}", ic.id));
            }
            if ic.members.is_empty() {
                errors.push(format!("interconnection {} has no members", ic.id));
            }
            for (&net_id, &worker_id) in &ic.members {
                match self.net(net_id) {
                    None => errors.push(format!(
                        "interconnection {} references unknown {net_id}",
                        ic.id
                    )),
                    Some(net) => {
                        if worker_id.0 == 0 || worker_id.0 as usize > net.worker_count {
                            errors.push(format!(
                                "interconnection {} references dangling {net_id}/{worker_id} \
                                 (NET has {} workers)",
                                ic.id, net.worker_count
                            ));
                        } else {
                            used_workers.insert((net_id, worker_id));
                        }
                    }
                }
            }
            if let Some(c) = coordinator {
                if !ic.members.contains_key(&c) {
                    errors.push(format!(
                        "interconnection {} excludes the coordinator NET {c}",
                        ic.id
                    ));
                }
            }
        }

        for net in &self.nets {
            for worker_id in net.worker_ids() {
                if !used_workers.contains(&(net.net_id, worker_id)) {
                    warnings.push(format!(
                        "{}/{worker_id} participates in no interconnection and will \
                         receive no gradient signal",
                        net.net_id
                    ));
                }
            }
        }

        if errors.is_empty() {
            Ok(warnings)
        } else {
            Err(Error::Topology(errors))
        }
    }

    /// Role table: the active NET coordinates; each NET's first worker hosts
    /// its local aggregator. Pure function of the topology.
    pub fn assign_roles(&self) -> Result<RoleTable> {
        self.validate()?;
        let coordinator = self
            .nets
            .iter()
            .find(|n| n.role == Role::Active)
            .map(|n| n.net_id)
            .expect("validation guarantees one active NET");
        let roles = self.nets.iter().map(|n| (n.net_id, n.role)).collect();
        let aggregators = self.nets.iter().map(|n| (n.net_id, WorkerId(1))).collect();
        Ok(RoleTable {
            coordinator,
            roles,
            aggregators,
        })
    }

    pub fn net(&self, id: NetId) -> Option<&NetDescriptor> {
        self.nets.iter().find(|n| n.net_id == id)
    }

    /// NETs in ascending id order — the canonical merge order.
    pub fn net_order(&self) -> Vec<NetId> {
        let mut ids: Vec<NetId> = self.nets.iter().map(|n| n.net_id).collect();
        ids.sort();
        ids
    }

    /// All workers, ascending by (net, worker).
    pub fn workers(&self) -> Vec<WorkerDescriptor> {
        let mut out = Vec::new();
        for net in &self.nets {
            for worker_id in net.worker_ids() {
                out.push(WorkerDescriptor {
                    net_id: net.net_id,
                    worker_id,
                    partition: format!("{}/{}", net.net_id, worker_id),
                });
            }
        }
        out.sort_by_key(|w| (w.net_id, w.worker_id));
        out
    }

    /// Total worker count across all NETs.
    pub fn total_workers(&self) -> usize {
        self.nets.iter().map(|n| n.worker_count).sum()
    }

    pub fn coordinator(&self) -> Option<NetId> {
        self.nets
            .iter()
            .find(|n| n.role == Role::Active)
            .map(|n| n.net_id)
    }
}
