//! The split sequence-to-sequence forecaster.
//!
//! Per-worker encoders compress a feature window into a fixed-length
//! context vector; the merging layer combines one context per NET into a
//! merged vector per interconnection; the shared decoder unrolls the merged
//! vector over the horizon; a dense head maps each decoder state to one
//! scalar KPI value.

mod checkpoint;
mod decoder;
mod encoder;
mod merge;
mod monolith;
#[cfg(test)]
pub(crate) mod testkit;

pub use checkpoint::{load_weights, save_weights, CHECKPOINT_VERSION};
pub use decoder::DecoderHead;
pub use encoder::{ContextVector, EncodedContext, Encoder};
pub use merge::{merge, split_merged_grad, MergedVector};
pub use monolith::{
    build_centralized_monolith, encoder_seed_label, CentralizedModel, TrainingSample,
    DECODER_SEED_LABEL,
};

use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::topology::NetId;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Encoder architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Bilstm,
    Lstm,
    DenseStack,
}

/// Architecture of one NET's encoder (every worker of the NET instantiates
/// an identical copy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub units: usize,
    /// Feature count per window row.
    pub input_width: usize,
}

impl EncoderSpec {
    /// Context-vector length: 2·units for BiLSTM (two directions
    /// concatenated), units otherwise.
    pub fn context_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Bilstm => 2 * self.units,
            EncoderKind::Lstm | EncoderKind::DenseStack => self.units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 || self.input_width == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder spec needs positive units and input width, got {}x{}",
                self.units, self.input_width
            )));
        }
        Ok(())
    }
}

/// How per-NET contexts combine into one merged vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeFn {
    Concat,
    Sum,
    Average,
}

/// Decoder plus prediction-head architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderHeadSpec {
    pub decoder_units: usize,
    /// Dense layers applied to each decoder state, in order; the last entry
    /// must have width 1 (one KPI scalar per horizon step).
    pub head_layers: Vec<(usize, Activation)>,
    pub horizon_steps: usize,
}

impl DecoderHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.decoder_units == 0 || self.horizon_steps == 0 {
            return Err(Error::InvalidConfig(
                "decoder needs positive units and horizon".into(),
            ));
        }
        match self.head_layers.last() {
            Some(&(1, _)) => Ok(()),
            other => Err(Error::InvalidConfig(format!(
                "final head layer must have width 1, got {other:?}"
            ))),
        }
    }
}

/// Complete model architecture plus its training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// One encoder spec per NET.
    pub encoders: BTreeMap<NetId, EncoderSpec>,
    pub merge_fn: MergeFn,
    pub decoder: DecoderHeadSpec,
    pub l2_lambda: f64,
    pub learning_rate: f64,
}

impl ModelConfig {
    /// Preset "c1": 100-unit BiLSTM encoders, 300-unit decoder, 200-wide
    /// head, L2 1e-06, learning rate 1e-03.
    pub fn preset_c1(input_widths: &BTreeMap<NetId, usize>, horizon_steps: usize) -> Self {
        Self::preset(input_widths, horizon_steps, 100, 300, 200, 1e-6, 1e-3)
    }

    /// Preset "c2": 100-unit BiLSTM encoders, 200-unit decoder, 100-wide
    /// head, L2 1e-08, learning rate 5e-05.
    pub fn preset_c2(input_widths: &BTreeMap<NetId, usize>, horizon_steps: usize) -> Self {
        Self::preset(input_widths, horizon_steps, 100, 200, 100, 1e-8, 5e-5)
    }

    /// Look up a preset by name.
    pub fn preset_by_name(
        name: &str,
        input_widths: &BTreeMap<NetId, usize>,
        horizon_steps: usize,
    ) -> Result<Self> {
        match name {
            "c1" => Ok(Self::preset_c1(input_widths, horizon_steps)),
            "c2" => Ok(Self::preset_c2(input_widths, horizon_steps)),
            other => Err(Error::InvalidConfig(format!(
                "unknown model preset {other:?} (expected \"c1\" or \"c2\")"
            ))),
        }
    }

    fn preset(
        input_widths: &BTreeMap<NetId, usize>,
        horizon_steps: usize,
        encoder_units: usize,
        decoder_units: usize,
        head_width: usize,
        l2_lambda: f64,
        learning_rate: f64,
    ) -> Self {
        let encoders = input_widths
            .iter()
            .map(|(&net, &width)| {
                (
                    net,
                    EncoderSpec {
                        kind: EncoderKind::Bilstm,
                        units: encoder_units,
                        input_width: width,
                    },
                )
            })
            .collect();
        ModelConfig {
            encoders,
            merge_fn: MergeFn::Concat,
            decoder: DecoderHeadSpec {
                decoder_units,
                head_layers: vec![(head_width, Activation::Relu), (1, Activation::Relu)],
                horizon_steps,
            },
            l2_lambda,
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::InvalidConfig("no encoder specs".into()));
        }
        for spec in self.encoders.values() {
            spec.validate()?;
        }
        self.decoder.validate()?;
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "l2 lambda must be finite and non-negative, got {}",
                self.l2_lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.merge_fn != MergeFn::Concat {
            let dims: Vec<usize> = self.encoders.values().map(|s| s.context_dim()).collect();
            if dims.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::InvalidConfig(format!(
                    "sum/average merge requires equal context lengths across NETs, got {dims:?}"
                )));
            }
        }
        Ok(())
    }

    /// Merged-vector length for an interconnection spanning `nets`.
    pub fn merged_dim(&self, nets: &[NetId]) -> Result<usize> {
        let mut dims = Vec::with_capacity(nets.len());
        for net in nets {
            let spec = self.encoders.get(net).ok_or_else(|| {
                Error::InvalidConfig(format!("no encoder spec for {net}"))
            })?;
            dims.push(spec.context_dim());
        }
        Ok(match self.merge_fn {
            MergeFn::Concat => dims.iter().sum(),
            MergeFn::Sum | MergeFn::Average => dims.first().copied().unwrap_or(0),
        })
    }

    /// Trainable parameter count of one NET's encoder.
    pub fn encoder_param_count(&self, net: NetId) -> Result<usize> {
        let spec = self
            .encoders
            .get(&net)
            .ok_or_else(|| Error::InvalidConfig(format!("no encoder spec for {net}")))?;
        let u = spec.units;
        let w = spec.input_width;
        Ok(match spec.kind {
            // Each direction: input kernel [w, 4u] + recurrent kernel
            // [u, 4u] + bias [4u].
            EncoderKind::Bilstm => 2 * (4 * u * (w + u + 1)),
            EncoderKind::Lstm => 4 * u * (w + u + 1),
            // Flattened window as a single dense layer per unit row is not
            // knowable without the history length; dense stacks count their
            // parameters on the live object instead.
            EncoderKind::DenseStack => 0,
        })
    }

    /// Trainable parameter count of the decoder and head for a merged input
    /// of length `merged_dim`.
    pub fn decoder_param_count(&self, merged_dim: usize) -> usize {
        let u = self.decoder.decoder_units;
        let mut count = 4 * u * (merged_dim + u + 1);
        let mut fan_in = u;
        for &(width, _) in &self.decoder.head_layers {
            count += fan_in * width + width;
            fan_in = width;
        }
        count
    }
}
