//! Messaging between protocol actors.
//!
//! Everything the actors exchange rides in an [`Envelope`]: context-vector
//! batches going to the coordinator, gradient slices coming back, weight
//! reports to per-entity aggregators, and the averaged weights returning to
//! workers. Envelope payloads are *named tensors only* — raw feature
//! windows never leave a worker, and [`audit_payload`] enforces exactly
//! that at every send.
//!
//! Two carriers exist: an in-process bus ([`bus::InProcessBus`]) with
//! deterministic delivery ordering for single-process runs and tests, and a
//! framed byte-stream codec ([`wire`]) so actors can also talk across
//! processes or machines.

pub mod bus;
pub mod wire;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{NetId, WorkerId};

pub use bus::InProcessBus;
pub use wire::{decode_frame, encode_frame, read_frame, write_frame, StreamTransport};

/// A protocol actor's address: its entity and worker number.
pub type Endpoint = (NetId, WorkerId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgType {
    /// Worker → coordinator: one batch of context vectors, shape `[s, N_e]`.
    ContextBatch,
    /// Coordinator → worker: the gradient slice for those contexts, `[s, N_e]`.
    SliceGrad,
    /// Worker → its entity's aggregator: updated encoder weights.
    WeightReport,
    /// Aggregator → worker: the entity's averaged encoder weights.
    GlobalWeights,
    /// Everything else (join requests, phase markers).
    Control,
}

/// Protocol phase a message belongs to. Variant order is delivery order
/// inside one batch loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Control,
    /// Context collection at the top of a training batch loop.
    Contexts,
    /// Gradient slices returning after the shared backward pass.
    GradReturn,
    /// Per-entity weight reporting.
    WeightReport,
    /// Averaged weights flowing back to the workers.
    GlobalSync,
    /// Inference-only context collection for validation/evaluation rounds;
    /// kept distinct so training-message accounting stays exact.
    Validation,
}

impl MsgType {
    /// Phases this message type may legally appear in.
    fn allowed_phases(self) -> &'static [Phase] {
        match self {
            MsgType::ContextBatch => &[Phase::Contexts, Phase::Validation],
            MsgType::SliceGrad => &[Phase::GradReturn],
            MsgType::WeightReport => &[Phase::WeightReport],
            MsgType::GlobalWeights => &[Phase::GlobalSync],
            MsgType::Control => &[Phase::Control],
        }
    }
}

/// Payload tensor name for context batches.
pub const CONTEXTS_TENSOR: &str = "contexts";
/// Payload tensor name for gradient slices.
pub const CONTEXT_GRADS_TENSOR: &str = "context_grads";

/// One protocol message. The payload is a list of named tensors; what the
/// names may be depends on the message type (see [`Envelope::validate`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub epoch: u64,
    pub batch: u64,
    pub phase: Phase,
    pub sender: Endpoint,
    pub receiver: Endpoint,
    /// Free-form marker for control messages (e.g. `"join"`).
    pub note: Option<String>,
    pub payload: Vec<(String, Tensor)>,
}

impl Envelope {
    /// Build and validate in one step.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        msg_type: MsgType,
        epoch: u64,
        batch: u64,
        phase: Phase,
        sender: Endpoint,
        receiver: Endpoint,
        payload: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let env = Envelope {
            msg_type,
            epoch,
            batch,
            phase,
            sender,
            receiver,
            note: None,
            payload,
        };
        env.validate()?;
        Ok(env)
    }

    /// Unique-per-loop sort key; deterministic delivery follows it.
    pub fn ordering_key(&self) -> (u64, u64, Phase, NetId, WorkerId) {
        (self.epoch, self.batch, self.phase, self.sender.0, self.sender.1)
    }

    /// Check the structural rules: phase fits the message type, payload
    /// names are unique and legal for the type, values are finite, and no
    /// raw input sneaks through.
    pub fn validate(&self) -> Result<()> {
        if !self.msg_type.allowed_phases().contains(&self.phase) {
            return Err(Error::Protocol(format!(
                "{:?} message cannot appear in phase {:?}",
                self.msg_type, self.phase
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, tensor) in &self.payload {
            if name.is_empty() {
                return Err(Error::Protocol("payload tensor with empty name".into()));
            }
            if !seen.insert(name) {
                return Err(Error::Protocol(format!(
                    "duplicate payload tensor name {name:?}"
                )));
            }
            tensor.ensure_finite("envelope payload")?;
        }
        audit_payload(self)?;
        match self.msg_type {
            MsgType::ContextBatch | MsgType::SliceGrad => {
                let expected = if self.msg_type == MsgType::ContextBatch {
                    CONTEXTS_TENSOR
                } else {
                    CONTEXT_GRADS_TENSOR
                };
                let [(name, tensor)] = self.payload.as_slice() else {
                    return Err(Error::Protocol(format!(
                        "{:?} must carry exactly one tensor, got {}",
                        self.msg_type,
                        self.payload.len()
                    )));
                };
                if name.as_str() != expected {
                    return Err(Error::Protocol(format!(
                        "{:?} tensor must be named {expected:?}, got {name:?}",
                        self.msg_type
                    )));
                }
                if tensor.rank() != 2 {
                    return Err(Error::Protocol(format!(
                        "{:?} tensor must have shape [s, N_e], got {:?}",
                        self.msg_type,
                        tensor.shape()
                    )));
                }
            }
            MsgType::WeightReport | MsgType::GlobalWeights => {
                if self.payload.is_empty() {
                    return Err(Error::Protocol(format!(
                        "{:?} must carry at least one weight tensor",
                        self.msg_type
                    )));
                }
            }
            MsgType::Control => {}
        }
        Ok(())
    }
}

/// The transmission-privacy assertion: no payload tensor may be tagged as
/// raw input. Everything leaving a worker must already be an encoding,
/// gradient, or weight — never the feature windows themselves.
pub fn audit_payload(env: &Envelope) -> Result<()> {
    for (name, _) in &env.payload {
        if name.starts_with("raw") {
            return Err(Error::PayloadViolation {
                sender: format!("{}/{}", env.sender.0, env.sender.1),
                detail: format!(
                    "{:?} message carries raw-input tensor {name:?}",
                    env.msg_type
                ),
            });
        }
    }
    Ok(())
}

/// Counts every message the bus carries, keyed by loop position and phase,
/// plus any audit violations attempted. The training-protocol acceptance
/// checks read their per-loop message budgets from here.
#[derive(Debug, Clone, Default)]
pub struct MessageMeter {
    counts: BTreeMap<(u64, u64, Phase), usize>,
    violations: usize,
}

impl MessageMeter {
    pub fn record(&mut self, env: &Envelope) {
        *self
            .counts
            .entry((env.epoch, env.batch, env.phase))
            .or_insert(0) += 1;
    }

    pub fn record_violation(&mut self) {
        self.violations += 1;
    }

    /// Messages carried in one phase of one batch loop.
    pub fn count(&self, epoch: u64, batch: u64, phase: Phase) -> usize {
        self.counts.get(&(epoch, batch, phase)).copied().unwrap_or(0)
    }

    /// Total messages carried in one phase across all loops.
    pub fn phase_total(&self, phase: Phase) -> usize {
        self.counts
            .iter()
            .filter(|((_, _, p), _)| *p == phase)
            .map(|(_, n)| n)
            .sum()
    }

    /// Attempted sends rejected by the payload audit.
    pub fn violations(&self) -> usize {
        self.violations
    }

    /// Batch loops observed per epoch, for sanity assertions.
    pub fn batches_seen(&self, epoch: u64) -> usize {
        self.counts
            .keys()
            .filter(|(e, _, p)| *e == epoch && *p != Phase::Validation && *p != Phase::Control)
            .map(|(_, b, _)| b)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(net: u32, worker: u32) -> Endpoint {
        (NetId(net), WorkerId(worker))
    }

    fn context_env(worker: u32) -> Envelope {
        Envelope::new(
            MsgType::ContextBatch,
            0,
            0,
            Phase::Contexts,
            ep(1, worker),
            ep(2, 1),
            vec![(CONTEXTS_TENSOR.into(), Tensor::zeros(&[4, 6]))],
        )
        .unwrap()
    }

    #[test]
    fn context_batches_must_be_rank_two_and_well_named() {
        assert!(Envelope::new(
            MsgType::ContextBatch,
            0,
            0,
            Phase::Contexts,
            ep(1, 1),
            ep(2, 1),
            vec![(CONTEXTS_TENSOR.into(), Tensor::zeros(&[4]))],
        )
        .is_err());
        assert!(Envelope::new(
            MsgType::ContextBatch,
            0,
            0,
            Phase::Contexts,
            ep(1, 1),
            ep(2, 1),
            vec![("outputs".into(), Tensor::zeros(&[4, 6]))],
        )
        .is_err());
        context_env(1).validate().unwrap();
    }

    #[test]
    fn phase_and_message_type_must_agree() {
        let mut env = context_env(1);
        env.phase = Phase::GradReturn;
        assert!(env.validate().is_err());
        env.phase = Phase::Validation; // inference rounds reuse the type
        env.validate().unwrap();
    }

    #[test]
    fn raw_input_tags_are_violations_naming_the_sender() {
        let mut env = context_env(3);
        env.payload = vec![("raw_window".into(), Tensor::zeros(&[4, 6]))];
        let err = audit_payload(&env).unwrap_err();
        match err {
            Error::PayloadViolation { sender, detail } => {
                assert_eq!(sender, "net1/worker3");
                assert!(detail.contains("raw_window"));
                assert!(detail.contains("ContextBatch"));
            }
            other => panic!("expected a payload violation, got {other:?}"),
        }
    }

    #[test]
    fn weight_reports_accept_many_tensors_but_not_none() {
        let payload = vec![
            ("fwd.w_input".into(), Tensor::zeros(&[3, 4])),
            ("fwd.bias".into(), Tensor::zeros(&[4])),
        ];
        Envelope::new(
            MsgType::WeightReport,
            1,
            2,
            Phase::WeightReport,
            ep(1, 1),
            ep(1, 1),
            payload,
        )
        .unwrap();
        assert!(Envelope::new(
            MsgType::WeightReport,
            1,
            2,
            Phase::WeightReport,
            ep(1, 1),
            ep(1, 1),
            vec![],
        )
        .is_err());
    }

    #[test]
    fn duplicate_and_nonfinite_payloads_are_rejected() {
        let dup = vec![
            ("w".into(), Tensor::zeros(&[2])),
            ("w".into(), Tensor::zeros(&[2])),
        ];
        assert!(Envelope::new(
            MsgType::GlobalWeights,
            0,
            0,
            Phase::GlobalSync,
            ep(1, 1),
            ep(1, 2),
            dup,
        )
        .is_err());
        let bad = vec![("w".into(), Tensor::filled(&[2], f64::NAN))];
        assert!(Envelope::new(
            MsgType::GlobalWeights,
            0,
            0,
            Phase::GlobalSync,
            ep(1, 1),
            ep(1, 2),
            bad,
        )
        .is_err());
    }

    #[test]
    fn ordering_keys_sort_by_loop_then_phase_then_sender() {
        let mut a = context_env(1);
        let mut b = context_env(2);
        assert!(a.ordering_key() < b.ordering_key());
        b.phase = Phase::Validation;
        assert!(a.ordering_key() < b.ordering_key());
        a.batch = 1;
        assert!(a.ordering_key() > b.ordering_key());
        a.batch = 0;
        a.epoch = 1;
        assert!(a.ordering_key() > b.ordering_key());
    }

    #[test]
    fn meter_separates_phases_and_counts_violations() {
        let mut meter = MessageMeter::default();
        for w in 1..=3 {
            meter.record(&context_env(w));
        }
        let mut val = context_env(1);
        val.phase = Phase::Validation;
        meter.record(&val);
        meter.record_violation();
        assert_eq!(meter.count(0, 0, Phase::Contexts), 3);
        assert_eq!(meter.count(0, 0, Phase::Validation), 1);
        assert_eq!(meter.count(0, 0, Phase::GradReturn), 0);
        assert_eq!(meter.phase_total(Phase::Contexts), 3);
        assert_eq!(meter.violations(), 1);
        assert_eq!(meter.batches_seen(0), 1);
    }
}
