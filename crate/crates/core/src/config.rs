//! Run configuration files.
//!
//! One versioned TOML document describes a complete run: the synthetic
//! workload, the derived topology's timing, the model preset (plus
//! overrides), the training schedule, and transport knobs. Unknown keys are
//! rejected so typos fail loudly instead of silently falling back to
//! defaults.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{scenario_topology, ScenarioConfig, SplitSpec};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::model::{MergeFn, ModelConfig};
use crate::protocol::{SchedulerMode, TrainOptions};
use crate::topology::{TimingPlan, Topology};

/// Format version this build reads and writes.
pub const CONFIG_VERSION: u32 = 1;

/// A full run description, straight from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Format version; mismatching documents are rejected.
    pub version: u32,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub timing: TimingSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub transport: TransportSection,
}

/// Workload generation and windowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenario: ScenarioConfig,
    /// Spacing of consecutive window anchors, in milliseconds.
    pub stride_ms: u32,
    /// Timeline fraction for training; validation takes `val_frac`, the
    /// rest is the test segment.
    pub train_frac: f64,
    pub val_frac: f64,
    /// Include the edge host as a third entity.
    pub with_mec: bool,
    /// History rows per window, shared by every entity.
    pub history_steps: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            scenario: ScenarioConfig::default(),
            stride_ms: 1_000,
            train_frac: 0.7,
            val_frac: 0.15,
            with_mec: true,
            history_steps: 125,
        }
    }
}

/// Shared clock of the prediction task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSection {
    pub encode_step_ms: u64,
    pub prediction_step_ms: u64,
    pub horizon_steps: usize,
}

impl Default for TimingSection {
    fn default() -> Self {
        TimingSection {
            encode_step_ms: 200,
            prediction_step_ms: 200,
            horizon_steps: 100,
        }
    }
}

/// Model preset plus optional overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Architecture preset: "c1" or "c2".
    pub preset: String,
    pub encoder_units: Option<usize>,
    pub decoder_units: Option<usize>,
    pub head_width: Option<usize>,
    pub merge_fn: Option<MergeFn>,
    pub l2_lambda: Option<f64>,
    pub learning_rate: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "c1".into(),
            encoder_units: None,
            decoder_units: None,
            head_width: None,
            merge_fn: None,
            l2_lambda: None,
            learning_rate: None,
        }
    }
}

/// Training schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub master_seed: u64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub validation_chunk: usize,
    pub mode: SchedulerMode,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let opts = TrainOptions::default();
        TrainingSection {
            master_seed: 42,
            batch_size: opts.batch_size,
            patience: opts.patience,
            max_epochs: opts.max_epochs,
            validation_chunk: opts.validation_chunk,
            mode: SchedulerMode::Deterministic,
        }
    }
}

/// Transport knobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    /// Barrier timeout for the threaded scheduler, in seconds.
    pub timeout_s: u64,
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection { timeout_s: 30 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            data: DataSection::default(),
            timing: TimingSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            transport: TransportSection::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate a TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Serialize back to TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} not supported (this build reads version {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.scenario.validate()?;
        if self.data.history_steps == 0 {
            return Err(Error::InvalidConfig("history_steps must be at least 1".into()));
        }
        if self.data.stride_ms == 0 {
            return Err(Error::InvalidConfig("stride_ms must be at least 1".into()));
        }
        self.split().validate_fractions()?;
        if self.training.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        // Topology and model carry their own validation; building them
        // exercises it.
        self.topology().validate()?;
        self.model_config()?.validate()
    }

    pub fn timing(&self) -> TimingPlan {
        TimingPlan {
            encode_step_ms: self.timing.encode_step_ms,
            prediction_step_ms: self.timing.prediction_step_ms,
            horizon_steps: self.timing.horizon_steps,
        }
    }

    /// The deployment this config describes.
    pub fn topology(&self) -> Topology {
        scenario_topology(
            &self.data.scenario,
            self.data.with_mec,
            self.data.history_steps,
            self.timing(),
        )
    }

    /// Model architecture: the named preset with this config's overrides.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let topology = self.topology();
        let input_widths: BTreeMap<_, _> = topology
            .nets
            .iter()
            .map(|n| (n.net_id, n.features.len()))
            .collect();
        let mut cfg = ModelConfig::preset_by_name(
            &self.model.preset,
            &input_widths,
            self.timing.horizon_steps,
        )?;
        if let Some(units) = self.model.encoder_units {
            for spec in cfg.encoders.values_mut() {
                spec.units = units;
            }
        }
        if let Some(units) = self.model.decoder_units {
            cfg.decoder.decoder_units = units;
        }
        if let Some(width) = self.model.head_width {
            cfg.decoder.head_layers = vec![(width, Activation::Relu), (1, Activation::Relu)];
        }
        if let Some(merge_fn) = self.model.merge_fn {
            cfg.merge_fn = merge_fn;
        }
        if let Some(l2) = self.model.l2_lambda {
            cfg.l2_lambda = l2;
        }
        if let Some(lr) = self.model.learning_rate {
            cfg.learning_rate = lr;
        }
        Ok(cfg)
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_frac: self.data.train_frac,
            val_frac: self.data.val_frac,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.training.batch_size,
            patience: self.training.patience,
            max_epochs: self.training.max_epochs,
            validation_chunk: self.training.validation_chunk,
        }
    }
}

trait ValidateFractions {
    fn validate_fractions(&self) -> Result<()>;
}

impl ValidateFractions for SplitSpec {
    fn validate_fractions(&self) -> Result<()> {
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
