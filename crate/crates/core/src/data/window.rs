//! Sliding-window extraction over the scenario tables.
//!
//! An *anchor* is a moment on the shared clock. For every anchor, each
//! worker contributes the trailing history window of its own table (its
//! net's `history_steps` most recent rows), and the coordinator contributes
//! the groundtruth sequence covering the prediction horizon after the
//! anchor. Anchors advance on a stride grid starting at the first moment
//! with full history; the last anchor still leaves room for the full
//! horizon.
//!
//! The timeline is cut into train/validation/test segments by fractions of
//! the scenario duration. A window (history plus horizon) must lie entirely
//! inside one segment; anchors whose span crosses a boundary are dropped, so
//! no sample ever mixes data across the split.

use std::collections::BTreeMap;

use crate::data::normalize::{Normalizer, OutOfRange};
use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::model::TrainingSample;
use crate::tensor::Tensor;
use crate::topology::{NetId, Topology, WorkerId};

/// Name of the groundtruth column in the active net's table; when absent,
/// the active table's last column is used as the target.
pub const TARGET_FEATURE: &str = "uplink_throughput";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Fractions of the timeline given to training and validation; the
/// remainder is the test segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

impl SplitSpec {
    /// Everything lands in the training segment.
    pub fn train_only() -> Self {
        SplitSpec {
            train_frac: 1.0,
            val_frac: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.train_frac > 0.0
            && self.val_frac >= 0.0
            && self.train_frac.is_finite()
            && self.val_frac.is_finite()
            && self.train_frac + self.val_frac <= 1.0 + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "split fractions train={} val={} must be positive and sum to at most 1",
                self.train_frac, self.val_frac
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    /// Anchor moment on the shared clock, in milliseconds.
    pub time_ms: u64,
    pub tag: SplitTag,
}

/// Normalized tables plus the anchor grid; samples are materialized on
/// demand so overlapping windows share storage.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    tables: BTreeMap<(NetId, WorkerId), Tensor>,
    normalizers: BTreeMap<(NetId, WorkerId), Normalizer>,
    history_rows: BTreeMap<NetId, usize>,
    period_ms: BTreeMap<NetId, u64>,
    target_key: (NetId, WorkerId),
    target_col: usize,
    prediction_step_ms: u64,
    horizon_steps: usize,
    anchors: Vec<Anchor>,
    /// Pooled count of normalized values outside [0, 1] (legal for
    /// validation/test rows; worth surfacing to the operator).
    pub out_of_range: OutOfRange,
}

/// Cut the scenario into per-anchor windows for every worker the topology
/// names. Normalizers are fitted on the training segment only, then applied
/// to the whole timeline. `stride_ms` is the spacing of consecutive anchors.
pub fn build_windows(
    scenario: &Scenario,
    topology: &Topology,
    stride_ms: u32,
    split: &SplitSpec,
) -> Result<WindowedDataset> {
    topology.validate()?;
    split.validate()?;
    if stride_ms == 0 {
        return Err(Error::InvalidConfig("window stride must be > 0".into()));
    }

    let mut duration_ms: Option<u64> = None;
    let mut grid_ms: u64 = 1;
    let mut max_history_ms: u64 = 0;
    let mut history_rows = BTreeMap::new();
    let mut period_ms = BTreeMap::new();
    for net in &topology.nets {
        let period = net.logging_period_ms;
        grid_ms = lcm(grid_ms, period);
        max_history_ms = max_history_ms.max((net.history_steps as u64 - 1) * period);
        history_rows.insert(net.net_id, net.history_steps);
        period_ms.insert(net.net_id, period);
        for worker in net.worker_ids() {
            let table = scenario.table(net.net_id, worker)?;
            if u64::from(table.logging_period_ms) != net.logging_period_ms {
                return Err(Error::Dataset(format!(
                    "{}/{worker} is sampled every {} ms but the topology declares {} ms",
                    net.net_id, table.logging_period_ms, net.logging_period_ms
                )));
            }
            if table.n_features() != net.features.len() {
                return Err(Error::Dataset(format!(
                    "{}/{worker} has {} features but the topology declares {}",
                    net.net_id,
                    table.n_features(),
                    net.features.len()
                )));
            }
            let table_ms = table.n_samples() as u64 * period;
            match duration_ms {
                None => duration_ms = Some(table_ms),
                Some(d) if d != table_ms => {
                    return Err(Error::Dataset(format!(
                        "tables disagree on scenario length: {table_ms} ms vs {d} ms"
                    )))
                }
                _ => {}
            }
        }
    }
    let duration_ms = duration_ms.expect("validated topology has at least one net");
    if u64::from(stride_ms) % grid_ms != 0 {
        return Err(Error::InvalidConfig(format!(
            "stride {stride_ms} ms must be a multiple of the common sampling grid {grid_ms} ms"
        )));
    }

    let active = topology
        .coordinator()
        .ok_or_else(|| Error::Topology(vec!["no active net".into()]))?;
    let active_net = topology
        .net(active)
        .ok_or_else(|| Error::Topology(vec![format!("descriptor missing for {active}")]))?;
    let target_key = (active, WorkerId(1));
    let target_col = active_net
        .features
        .iter()
        .position(|f| f == TARGET_FEATURE)
        .unwrap_or(active_net.features.len() - 1);
    let pred_ms = topology.timing.prediction_step_ms;
    let target_period = active_net.logging_period_ms;
    if pred_ms == 0 || pred_ms % target_period != 0 {
        return Err(Error::InvalidConfig(format!(
            "prediction step {pred_ms} ms must be a positive multiple of the \
             groundtruth sampling period {target_period} ms"
        )));
    }
    let horizon_steps = topology.timing.horizon_steps;
    let horizon_ms = pred_ms * horizon_steps as u64;

    // First anchor with full history, on the common grid; last anchor that
    // still leaves room for the horizon (sample times end one period short
    // of the nominal duration).
    let first = max_history_ms.div_ceil(grid_ms) * grid_ms;
    let last_sample_ms = duration_ms - target_period;
    if horizon_ms + first > last_sample_ms {
        return Err(Error::Dataset(format!(
            "scenario of {duration_ms} ms is too short for {max_history_ms} ms of history \
             plus a {horizon_ms} ms horizon"
        )));
    }
    let last = last_sample_ms - horizon_ms;

    let train_end_ms = (duration_ms as f64 * split.train_frac).floor() as u64;
    let val_end_ms = (duration_ms as f64 * (split.train_frac + split.val_frac)).floor() as u64;
    let mut anchors = Vec::new();
    let mut time = first;
    while time <= last {
        let span_start = time - max_history_ms;
        let span_end = time + horizon_ms;
        let tag = if span_end < train_end_ms {
            Some(SplitTag::Train)
        } else if span_start >= train_end_ms && span_end < val_end_ms {
            Some(SplitTag::Val)
        } else if span_start >= val_end_ms {
            Some(SplitTag::Test)
        } else {
            None // spans a boundary: dropped
        };
        if let Some(tag) = tag {
            anchors.push(Anchor { time_ms: time, tag });
        }
        time += u64::from(stride_ms);
    }
    if anchors.is_empty() {
        return Err(Error::Dataset(
            "no anchors survive the split; lengthen the scenario or loosen the split".into(),
        ));
    }

    // Fit on training rows only, scale the whole timeline.
    let mut tables = BTreeMap::new();
    let mut normalizers = BTreeMap::new();
    let mut out_of_range = OutOfRange::default();
    for net in &topology.nets {
        let train_rows = train_end_ms.div_ceil(net.logging_period_ms);
        for worker in net.worker_ids() {
            let table = scenario.table(net.net_id, worker)?;
            let norm = Normalizer::fit(&table.values, 0..train_rows as usize)?;
            let (scaled, report) = norm.apply(&table.values)?;
            out_of_range.absorb(report);
            tables.insert((net.net_id, worker), scaled);
            normalizers.insert((net.net_id, worker), norm);
        }
    }

    Ok(WindowedDataset {
        tables,
        normalizers,
        history_rows,
        period_ms,
        target_key,
        target_col,
        prediction_step_ms: topology.timing.prediction_step_ms,
        horizon_steps,
        anchors,
        out_of_range,
    })
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }

    pub fn prediction_step_ms(&self) -> u64 {
        self.prediction_step_ms
    }

    /// The groundtruth value at the anchor itself (normalized) — the most
    /// recent observation, which a persistence forecaster repeats over the
    /// whole horizon.
    pub fn last_observed_target(&self, idx: usize) -> Result<f64> {
        let anchor = self
            .anchors
            .get(idx)
            .ok_or_else(|| Error::Dataset(format!("anchor index {idx} out of range")))?;
        let table = &self.tables[&self.target_key];
        let period = self.period_ms[&self.target_key.0];
        let anchor_row = (anchor.time_ms / period) as usize;
        Ok(table.get(anchor_row, self.target_col))
    }

    /// Anchor indices belonging to one split.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.anchors
            .iter()
            .enumerate()
            .filter(|(_, a)| a.tag == tag)
            .map(|(i, _)| i)
            .collect()
    }

    /// Raw (min, max) of the groundtruth feature on the training segment —
    /// the denormalization range for reporting in physical units.
    pub fn target_range(&self) -> (f64, f64) {
        self.normalizers[&self.target_key].feature_range(self.target_col)
    }

    /// Map a normalized prediction back to physical units.
    pub fn denormalize_target(&self, v: f64) -> f64 {
        self.normalizers[&self.target_key].invert_one(self.target_col, v)
    }

    pub fn normalizer(&self, net: NetId, worker: WorkerId) -> Result<&Normalizer> {
        self.normalizers
            .get(&(net, worker))
            .ok_or_else(|| Error::Dataset(format!("no normalizer for {net}/{worker}")))
    }

    /// Materialize the sample at one anchor: a history window per worker
    /// plus the groundtruth horizon.
    pub fn sample(&self, idx: usize) -> Result<TrainingSample> {
        let anchor = *self
            .anchors
            .get(idx)
            .ok_or_else(|| Error::Dataset(format!("anchor index {idx} out of range")))?;
        let mut windows = BTreeMap::new();
        for (&(net, worker), table) in &self.tables {
            let period = self.period_ms[&net];
            let h = self.history_rows[&net];
            let anchor_row = (anchor.time_ms / period) as usize;
            let start = anchor_row + 1 - h;
            let mut window = Tensor::zeros(&[h, table.cols()]);
            for r in 0..h {
                for c in 0..table.cols() {
                    window.set(r, c, table.get(start + r, c));
                }
            }
            windows.insert((net, worker), window);
        }

        let table = &self.tables[&self.target_key];
        let period = self.period_ms[&self.target_key.0];
        let ratio = (self.prediction_step_ms / period) as usize;
        let anchor_row = (anchor.time_ms / period) as usize;
        let mut target = Tensor::zeros(&[self.horizon_steps]);
        for k in 1..=self.horizon_steps {
            target.data_mut()[k - 1] = table.get(anchor_row + k * ratio, self.target_col);
        }

        Ok(TrainingSample {
            windows,
            target,
            anchor: anchor.time_ms,
        })
    }

    /// Materialize every sample of one split, in anchor order.
    pub fn samples(&self, tag: SplitTag) -> Result<Vec<TrainingSample>> {
        self.indices(tag).into_iter().map(|i| self.sample(i)).collect()
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
