//! Small shared fixtures for model and protocol tests: a reduced topology,
//! a shrunken model configuration, and deterministic random samples.

use std::collections::BTreeMap;

use crate::layers::Activation;
use crate::rng::seeded_rng;
use crate::tensor::Tensor;
use crate::topology::{
    Interconnection, NetDescriptor, NetId, Role, TimingPlan, Topology, WorkerId,
};

use super::monolith::TrainingSample;
use super::{EncoderKind, EncoderSpec, ModelConfig};

/// A topology with one NET per entry of `worker_counts` (the first is the
/// active one) and one interconnection per distinct worker slot, so every
/// worker participates in at least one interconnection.
pub(crate) fn tiny_topology(worker_counts: &[usize]) -> Topology {
    let nets = worker_counts
        .iter()
        .enumerate()
        .map(|(i, &k)| NetDescriptor {
            net_id: NetId(i as u32 + 1),
            name: format!("net-{}", i + 1),
            role: if i == 0 { Role::Active } else { Role::Passive },
            logging_period_ms: 200,
            history_steps: 4,
            features: vec!["a".into(), "b".into()],
            worker_count: k,
        })
        .collect::<Vec<_>>();
    let ic_count = worker_counts.iter().copied().max().unwrap_or(1);
    let interconnections = (1..=ic_count as u32)
        .map(|a| Interconnection {
            id: a,
            members: nets
                .iter()
                .map(|n| {
                    let k = ((a - 1) % n.worker_count as u32) + 1;
                    (n.net_id, WorkerId(k))
                })
                .collect(),
        })
        .collect();
    Topology {
        nets,
        interconnections,
        timing: TimingPlan {
            encode_step_ms: 200,
            prediction_step_ms: 200,
            horizon_steps: 3,
        },
    }
}

/// The full preset shrunk to a handful of units so gradient-heavy tests run
/// in milliseconds.
pub(crate) fn tiny_config(topology: &Topology, units: usize) -> ModelConfig {
    let mut cfg = ModelConfig::preset_c1(
        &topology
            .nets
            .iter()
            .map(|n| (n.net_id, n.features.len()))
            .collect(),
        topology.timing.horizon_steps,
    );
    for spec in cfg.encoders.values_mut() {
        *spec = EncoderSpec {
            kind: EncoderKind::Bilstm,
            units,
            input_width: spec.input_width,
        };
    }
    cfg.decoder.decoder_units = units;
    cfg.decoder.head_layers = vec![(units, Activation::Relu), (1, Activation::Relu)];
    cfg.l2_lambda = 1e-4;
    cfg.learning_rate = 1e-2;
    cfg
}

/// Deterministic nonnegative random samples covering every worker slot of
/// the topology.
pub(crate) fn tiny_samples(topology: &Topology, count: usize, seed: u64) -> Vec<TrainingSample> {
    let mut rng = seeded_rng(seed, "monolith.testdata");
    (0..count)
        .map(|i| {
            let mut windows = BTreeMap::new();
            for net in &topology.nets {
                for worker in net.worker_ids() {
                    let w = Tensor::glorot_uniform(net.history_steps, net.features.len(), &mut rng)
                        .map(|v| v.abs());
                    windows.insert((net.net_id, worker), w);
                }
            }
            let target = Tensor::glorot_uniform(1, topology.timing.horizon_steps, &mut rng)
                .map(|v| v.abs())
                .reshape(&[topology.timing.horizon_steps])
                .unwrap();
            TrainingSample {
                windows,
                target,
                anchor: i as u64,
            }
        })
        .collect()
}
