//! Forecast quality metrics in physical units, plus the persistence
//! baseline every learned forecaster has to beat.
//!
//! Errors are pooled over `samples × interconnections` separately for each
//! horizon step, after mapping both prediction and groundtruth back to
//! physical units. Because min-max denormalization is affine, the reported
//! MAE is exactly the normalized MAE scaled by the target range — a
//! property the tests pin down.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainingSample;
use crate::tensor::Tensor;

/// Per-horizon-step forecast errors in the target's physical units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Lead time of each horizon step, in milliseconds after the anchor.
    pub horizon_step_ms: Vec<u64>,
    /// Mean absolute error per horizon step.
    pub mae: Vec<f64>,
    /// Population standard deviation of the absolute errors per step.
    pub std_dev: Vec<f64>,
    /// Mean of the per-step MAE curve; with equal counts per step this is
    /// identical to pooling every error into one mean.
    pub overall_mae: f64,
    /// MAE at the furthest horizon step.
    pub final_step_mae: f64,
    /// Pooled error count per horizon step.
    pub pairs: usize,
}

/// Compute pooled per-step metrics from aligned prediction/groundtruth
/// pairs, both in normalized space; `denorm` maps a normalized target value
/// to physical units.
pub fn forecast_metrics(
    predictions: &[Tensor],
    truths: &[Tensor],
    denorm: impl Fn(f64) -> f64,
    prediction_step_ms: u64,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Dataset("no predictions to score".into()));
    }
    if predictions.len() != truths.len() {
        return Err(Error::Dataset(format!(
            "{} predictions but {} groundtruth sequences",
            predictions.len(),
            truths.len()
        )));
    }
    let horizon = predictions[0].len();
    if horizon == 0 {
        return Err(Error::Dataset("empty prediction horizon".into()));
    }
    for (pred, truth) in predictions.iter().zip(truths) {
        if pred.rank() != 1 || truth.rank() != 1 || pred.len() != horizon || truth.len() != horizon
        {
            return Err(Error::ShapeMismatch {
                context: "eval::forecast_metrics",
                expected: vec![horizon],
                got: pred.shape().to_vec(),
            });
        }
    }

    let pairs = predictions.len();
    let mut mae = Vec::with_capacity(horizon);
    let mut std_dev = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let mut sum = 0.0;
        for (pred, truth) in predictions.iter().zip(truths) {
            sum += (denorm(pred.data()[k]) - denorm(truth.data()[k])).abs();
        }
        let mean = sum / pairs as f64;
        let mut var = 0.0;
        for (pred, truth) in predictions.iter().zip(truths) {
            let err = (denorm(pred.data()[k]) - denorm(truth.data()[k])).abs();
            var += (err - mean) * (err - mean);
        }
        mae.push(mean);
        std_dev.push((var / pairs as f64).sqrt());
    }
    let overall_mae = mae.iter().sum::<f64>() / horizon as f64;
    let final_step_mae = mae[horizon - 1];
    Ok(MetricsReport {
        horizon_step_ms: (1..=horizon as u64).map(|k| k * prediction_step_ms).collect(),
        mae,
        std_dev,
        overall_mae,
        final_step_mae,
        pairs,
    })
}

/// The persistence forecaster: repeat each sample's most recent observation
/// across the whole horizon. `last_observed` carries one normalized value
/// per sample.
pub fn persistence_predictions(last_observed: &[f64], horizon_steps: usize) -> Vec<Tensor> {
    last_observed
        .iter()
        .map(|&v| Tensor::filled(&[horizon_steps], v))
        .collect()
}

/// Run `predict` over every sample and flatten the per-interconnection
/// outputs into aligned `(predictions, truths)` lists, the shape
/// [`forecast_metrics`] consumes. The groundtruth is duplicated per
/// interconnection so every prediction head is scored against it.
pub fn paired_predictions<F>(
    samples: &[TrainingSample],
    mut predict: F,
) -> Result<(Vec<Tensor>, Vec<Tensor>)>
where
    F: FnMut(&TrainingSample) -> Result<Vec<(u32, Tensor)>>,
{
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    for sample in samples {
        for (_, pred) in predict(sample)? {
            predictions.push(pred);
            truths.push(sample.target.clone());
        }
    }
    Ok((predictions, truths))
}

/// Write the per-step curve as CSV: `horizon_step_ms,mae_mbps,std_mbps`, one line
/// per horizon step. Values use Rust's shortest-round-trip float formatting,
/// so the output is bit-stable across runs.
pub fn write_csv(report: &MetricsReport, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "horizon_step_ms,mae_mbps,std_mbps")?;
    for k in 0..report.mae.len() {
        writeln!(
            out,
            "{},{},{}",
            report.horizon_step_ms[k], report.mae[k], report.std_dev[k]
        )?;
    }
    Ok(())
}
