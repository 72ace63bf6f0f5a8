//! Synthetic road-traffic workload for uplink-throughput prediction.
//!
//! A seeded generator produces time-aligned feature tables for three kinds of
//! network entity — a fleet of tele-operated vehicles, the base station that
//! serves them (which also holds the groundtruth throughput), and an edge
//! host observing neighbor cells. On top of the raw tables this module
//! provides min-max normalization fitted on the training split and
//! sliding-window extraction that turns the tables into per-worker history
//! windows plus coordinator-held target sequences.

pub mod generator;
pub mod normalize;
pub mod store;
pub mod window;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::topology::{
    Interconnection, NetDescriptor, NetId, Role, TimingPlan, Topology, WorkerId,
};

pub use generator::generate_scenario;
pub use normalize::{normalize_tables, Normalizer, OutOfRange};
pub use store::{load_scenario, save_scenario, table_to_csv};
pub use window::{build_windows, SplitSpec, SplitTag, WindowedDataset};

/// Net id of the vehicle fleet (one worker per vehicle).
pub const UE_NET: NetId = NetId(1);
/// Net id of the base station; the active net holding the groundtruth.
pub const BS_NET: NetId = NetId(2);
/// Net id of the edge host observing neighbor cells.
pub const MEC_NET: NetId = NetId(3);

/// Per-vehicle feature columns, in table order.
pub const UE_FEATURES: [&str; 6] = [
    "latitude",
    "longitude",
    "speed",
    "distance_to_bs",
    "future_latitude",
    "future_longitude",
];
/// Base-station feature columns, in table order. The last column is the
/// groundtruth uplink throughput, which doubles as a historical input.
pub const BS_FEATURES: [&str; 4] = [
    "load_resource_blocks",
    "attached_ue_count",
    "uplink_sinr",
    "uplink_throughput",
];
/// Edge-host feature columns: attach count and load for two neighbor cells.
pub const MEC_FEATURES: [&str; 4] = [
    "neighbor1_ue_count",
    "neighbor1_load_rb",
    "neighbor2_ue_count",
    "neighbor2_load_rb",
];

/// Index of the groundtruth throughput column inside [`BS_FEATURES`].
pub const THROUGHPUT_COLUMN: usize = 3;

/// Knobs for the synthetic scenario. Everything is deterministic given the
/// seed; two runs with an identical config produce identical tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Scenario length in seconds.
    pub duration_s: u32,
    /// Sampling period shared by every table, in milliseconds.
    pub logging_period_ms: u32,
    /// Number of tele-operated vehicles (one worker each on the vehicle net).
    pub n_tod_ues: u32,
    /// Master seed; every stochastic stream derives its own generator from it.
    pub seed: u64,
    /// Half-width of the square roaming area, in meters (base station at the
    /// center).
    pub area_half_m: f64,
    /// Vehicles farther than this from the base station count as detached.
    pub attach_radius_m: f64,
    /// Maximum per-tick change of the background-load random walk, in
    /// interfering-station units; the walk is clamped to [0, 100].
    pub load_step_max: f64,
    /// Throughput lost to a fully loaded cell, in Mbps (`a` in the capacity
    /// model below).
    pub load_weight: f64,
    /// Throughput lost to poor link margins, in Mbps·dB shared across the
    /// fleet (`b` in the capacity model below).
    pub snr_weight: f64,
    /// Standard deviation of the additive throughput noise, in Mbps.
    pub noise_std_mbps: f64,
    /// Delay between cause (load, link margins) and effect (throughput), in
    /// seconds. Makes the near future of the target a function of features
    /// the model has already seen.
    pub coupling_lag_s: f64,
    /// How far ahead the planned-route features look, in seconds.
    pub future_offset_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration_s: 3280,
            logging_period_ms: 200,
            n_tod_ues: 5,
            seed: 42,
            area_half_m: 300.0,
            attach_radius_m: 400.0,
            load_step_max: 1.5,
            load_weight: 8.0,
            snr_weight: 10.0,
            noise_std_mbps: 0.25,
            coupling_lag_s: 1.0,
            future_offset_s: 20.0,
        }
    }
}

impl ScenarioConfig {
    /// Number of samples each table holds.
    pub fn samples(&self) -> usize {
        (u64::from(self.duration_s) * 1000 / u64::from(self.logging_period_ms)) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.duration_s == 0 {
            return Err(Error::InvalidConfig("scenario duration must be > 0".into()));
        }
        if self.logging_period_ms == 0 || 1000 % self.logging_period_ms != 0 {
            return Err(Error::InvalidConfig(format!(
                "logging period must divide one second, got {} ms",
                self.logging_period_ms
            )));
        }
        if self.n_tod_ues == 0 {
            return Err(Error::InvalidConfig("need at least one vehicle".into()));
        }
        for (name, value) in [
            ("area_half_m", self.area_half_m),
            ("attach_radius_m", self.attach_radius_m),
        ] {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {value}"
                )));
            }
        }
        for (name, value) in [
            ("load_step_max", self.load_step_max),
            ("load_weight", self.load_weight),
            ("snr_weight", self.snr_weight),
            ("noise_std_mbps", self.noise_std_mbps),
            ("coupling_lag_s", self.coupling_lag_s),
            ("future_offset_s", self.future_offset_s),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative and finite, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// One entity's time-aligned feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesTable {
    pub net: NetId,
    pub worker: WorkerId,
    pub feature_names: Vec<String>,
    /// Unit label per feature, index-aligned with `feature_names`.
    pub units: Vec<String>,
    pub logging_period_ms: u32,
    pub seed: u64,
    /// Row-major samples, shape `[n_samples, n_features]`.
    pub values: Tensor,
}

impl TimeSeriesTable {
    pub fn n_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    /// Full column as a plain vector.
    pub fn column(&self, feature: usize) -> Result<Vec<f64>> {
        if feature >= self.n_features() {
            return Err(Error::Dataset(format!(
                "feature index {feature} out of range for {} columns",
                self.n_features()
            )));
        }
        Ok((0..self.n_samples())
            .map(|r| self.values.get(r, feature))
            .collect())
    }
}

/// A full generated scenario: every entity's table under one config echo.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub tables: BTreeMap<(NetId, WorkerId), TimeSeriesTable>,
}

impl Scenario {
    pub fn table(&self, net: NetId, worker: WorkerId) -> Result<&TimeSeriesTable> {
        self.tables
            .get(&(net, worker))
            .ok_or_else(|| Error::Dataset(format!("no table for {net}/{worker}")))
    }

    /// The base-station table, which carries the groundtruth throughput.
    pub fn groundtruth_table(&self) -> Result<&TimeSeriesTable> {
        self.table(BS_NET, WorkerId(1))
    }
}

/// Topology matching a generated scenario: one worker per vehicle on the
/// fleet net, the base station as the active net (and coordinator), and
/// optionally the edge host. Interconnection `k` joins vehicle `k` with the
/// base station (and edge host when present).
pub fn scenario_topology(
    cfg: &ScenarioConfig,
    with_mec: bool,
    history_steps: usize,
    timing: TimingPlan,
) -> Topology {
    let strings = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let net = |id, name: &str, role, features: Vec<String>, workers| NetDescriptor {
        net_id: id,
        name: name.into(),
        role,
        logging_period_ms: u64::from(cfg.logging_period_ms),
        history_steps,
        features,
        worker_count: workers,
    };
    let mut nets = vec![
        net(
            UE_NET,
            "tod-ue",
            Role::Passive,
            strings(&UE_FEATURES),
            cfg.n_tod_ues as usize,
        ),
        net(BS_NET, "bs", Role::Active, strings(&BS_FEATURES), 1),
    ];
    if with_mec {
        nets.push(net(MEC_NET, "mec", Role::Passive, strings(&MEC_FEATURES), 1));
    }
    let interconnections = (1..=cfg.n_tod_ues)
        .map(|k| {
            let mut members: BTreeMap<NetId, WorkerId> =
                [(UE_NET, WorkerId(k)), (BS_NET, WorkerId(1))].into();
            if with_mec {
                members.insert(MEC_NET, WorkerId(1));
            }
            Interconnection { id: k, members }
        })
        .collect();
    Topology {
        nets,
        interconnections,
        timing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_sized_like_the_reference_run() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.samples(), 16_400);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for mutate in [
            (|c: &mut ScenarioConfig| c.duration_s = 0) as fn(&mut ScenarioConfig),
            |c| c.logging_period_ms = 0,
            |c| c.logging_period_ms = 300, // does not divide one second
            |c| c.n_tod_ues = 0,
            |c| c.area_half_m = -1.0,
            |c| c.noise_std_mbps = f64::NAN,
        ] {
            let mut cfg = ScenarioConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn scenario_topology_is_valid_with_and_without_the_edge_host() {
        let cfg = ScenarioConfig::default();
        let timing = TimingPlan {
            encode_step_ms: 200,
            prediction_step_ms: 200,
            horizon_steps: 100,
        };
        for with_mec in [false, true] {
            let topo = scenario_topology(&cfg, with_mec, 125, timing.clone());
            let warnings = topo.validate().unwrap();
            assert!(warnings.is_empty(), "unexpected warnings: {warnings:?}");
            assert_eq!(topo.interconnections.len(), 5);
            assert_eq!(topo.nets.len(), if with_mec { 3 } else { 2 });
        }
    }
}
