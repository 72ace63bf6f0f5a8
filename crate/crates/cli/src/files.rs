//! On-disk JSON schemas shared across subcommands: `train` writes
//! `summary.json`, `eval` writes `metrics.json`, `attack` writes
//! `privacy.json`, and `report` reads all three back.

use serde::{Deserialize, Serialize};
use splitqos::eval::MetricsReport;
use splitqos::privacy::EntityPrivacy;
use splitqos::protocol::{EarlyStopState, SchedulerMode};
use std::collections::BTreeMap;

pub const TRAIN_SUMMARY: &str = "summary.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const RESOLVED_CONFIG: &str = "config.toml";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const PRIVACY_JSON: &str = "privacy.json";
pub const PRIVACY_TEXT: &str = "privacy.txt";

/// What `train` records about a finished run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub master_seed: u64,
    pub mode: SchedulerMode,
    /// `true` when the single-process reference model was trained instead
    /// of the distributed deployment.
    pub centralized: bool,
    pub epochs_run: usize,
    pub batches_run: usize,
    /// Validation MSE before the first weight update.
    pub pre_training_val_mse: f64,
    pub final_val_mse: f64,
    pub best_val_mse: f64,
    pub early_stop: EarlyStopState,
    /// 16-hex digest of the checkpointed weights.
    pub checkpoint_checksum: String,
    pub wall_s: f64,
}

/// What `eval` records: the model curve against the persistence baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReportFile {
    pub split: String,
    pub model: MetricsReport,
    pub persistence: MetricsReport,
    /// Relative MAE improvement over persistence, in percent.
    pub improvement_percent: f64,
}

/// One attacked window, as reported by `attack`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetReport {
    /// Window anchor, in scenario milliseconds.
    pub anchor_ms: u64,
    /// `‖E(x̂) − c‖²` at the best estimate.
    pub context_distance: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Input-space distance `u` between truth and estimate.
    pub input_distance: f64,
    /// `S = 100 / (1 + u)`.
    pub similarity: f64,
    /// Downsampled `(iteration, best distance so far)` curve.
    pub trajectory: Vec<(u64, f64)>,
}

/// Per-feature outcome averaged over an entity's attacked windows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRow {
    pub name: String,
    pub mean_similarity: f64,
    /// `false` for columns that are already public knowledge (the reported
    /// KPI itself); attacks recovering only those leak nothing new.
    pub sensitive: bool,
}

/// Everything `attack` learned about one entity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityReport {
    /// Human name of the entity class (e.g. `tod-ue`).
    pub name: String,
    pub summary: EntityPrivacy,
    pub features: Vec<FeatureRow>,
    pub targets: Vec<TargetReport>,
}

/// The `attack` output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackReportFile {
    pub seed: u64,
    pub max_iters: usize,
    pub windows_per_entity: usize,
    pub entities: BTreeMap<String, EntityReport>,
}
