//! The epoch driver: shuffle, run batch loops, validate, stop early, and
//! stream a machine-readable JSONL log.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_weights, CentralizedModel, TrainingSample};
use crate::tensor::Tensor;

use super::cluster::Cluster;
use super::{epoch_plan, weight_checksum, BatchPlan, EarlyStopState, WeightSet};

/// Knobs for one training run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Hard epoch cap.
    pub max_epochs: usize,
    /// Validation samples per inference round; bounds memory only, the
    /// pooled MSE is chunk-size independent.
    pub validation_chunk: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 64,
            patience: 10,
            max_epochs: EarlyStopState::DEFAULT_MAX_EPOCHS,
            validation_chunk: 256,
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    /// One batch loop: its loss and each entity's post-aggregation weight
    /// checksum (identical checksums across runs mean identical training).
    Batch {
        epoch: u64,
        batch: u64,
        loss: f64,
        aggregate_checksums: BTreeMap<String, String>,
    },
    /// One epoch boundary: validation MSE and the stopping state after
    /// folding it in.
    Epoch {
        epoch: u64,
        val_mse: f64,
        early_stop: EarlyStopState,
    },
}

/// Everything a finished run reports.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub records: Vec<LogRecord>,
    /// Validation MSE before the first weight update.
    pub pre_training_val_mse: f64,
    /// Validation MSE after each completed epoch.
    pub epoch_val_mse: Vec<f64>,
    /// Every batch loop's loss, in execution order.
    pub batch_losses: Vec<f64>,
    pub early_stop: EarlyStopState,
    pub epochs_run: usize,
}

/// What the epoch driver asks of a trainable pipeline. Implemented by the
/// distributed cluster and by the single-process oracle so both follow the
/// same plans, log format, and stopping rule.
trait EpochTarget {
    fn master_seed(&self) -> u64;
    /// One optimizer step over the plan; returns the batch loss and each
    /// entity's post-step weight checksum.
    fn step(
        &mut self,
        samples: &[TrainingSample],
        plan: &BatchPlan,
    ) -> Result<(f64, BTreeMap<String, String>)>;
    fn validation_mse(&mut self, val: &[TrainingSample], epoch: u64, chunk: usize) -> Result<f64>;
    fn weights(&self) -> Result<BTreeMap<String, Tensor>>;
}

impl EpochTarget for Cluster {
    fn master_seed(&self) -> u64 {
        Cluster::master_seed(self)
    }

    fn step(
        &mut self,
        samples: &[TrainingSample],
        plan: &BatchPlan,
    ) -> Result<(f64, BTreeMap<String, String>)> {
        let outcome = self.run_batch_loop(samples, plan)?;
        let checksums = outcome
            .checksums
            .iter()
            .map(|(net, sum)| (net.to_string(), sum.clone()))
            .collect();
        Ok((outcome.loss, checksums))
    }

    fn validation_mse(&mut self, val: &[TrainingSample], epoch: u64, chunk: usize) -> Result<f64> {
        Cluster::validation_mse(self, val, epoch, chunk)
    }

    fn weights(&self) -> Result<BTreeMap<String, Tensor>> {
        Cluster::weights(self)
    }
}

struct CentralizedTarget<'a> {
    model: &'a mut CentralizedModel,
    master_seed: u64,
}

impl EpochTarget for CentralizedTarget<'_> {
    fn master_seed(&self) -> u64 {
        self.master_seed
    }

    fn step(
        &mut self,
        samples: &[TrainingSample],
        plan: &BatchPlan,
    ) -> Result<(f64, BTreeMap<String, String>)> {
        let mut batch = Vec::with_capacity(plan.sample_indices.len());
        for &i in &plan.sample_indices {
            batch.push(
                samples
                    .get(i)
                    .ok_or_else(|| Error::Dataset(format!("sample index {i} out of range")))?
                    .clone(),
            );
        }
        let loss = self.model.train_batch(&batch)?;
        let mut checksums = BTreeMap::new();
        for (net, encoder) in &self.model.encoders {
            let set: WeightSet = encoder
                .named_params()
                .into_iter()
                .map(|(name, p)| (name, p.clone()))
                .collect();
            checksums.insert(net.to_string(), weight_checksum(&set));
        }
        Ok((loss, checksums))
    }

    fn validation_mse(&mut self, val: &[TrainingSample], _epoch: u64, _chunk: usize) -> Result<f64> {
        self.model.validation_mse(val)
    }

    fn weights(&self) -> Result<BTreeMap<String, Tensor>> {
        Ok(self.model.weights())
    }
}

/// Train `cluster` on `train` until the early-stopping rule fires, writing
/// one JSON object per line to `log` (when given) and the final weights to
/// `checkpoint` (when given).
pub fn run_training(
    cluster: &mut Cluster,
    train: &[TrainingSample],
    val: &[TrainingSample],
    opts: &TrainOptions,
    log: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<TrainingReport> {
    drive(cluster, train, val, opts, log, checkpoint)
}

/// Train the single-process oracle with the exact driver the distributed
/// run uses: same shuffles, same log records, same stopping rule. With one
/// worker per entity and a shared master seed, its loss log matches a
/// distributed run's within float tolerance.
pub fn run_centralized_training(
    model: &mut CentralizedModel,
    master_seed: u64,
    train: &[TrainingSample],
    val: &[TrainingSample],
    opts: &TrainOptions,
    log: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<TrainingReport> {
    let mut target = CentralizedTarget { model, master_seed };
    drive(&mut target, train, val, opts, log, checkpoint)
}

fn drive<T: EpochTarget>(
    target: &mut T,
    train: &[TrainingSample],
    val: &[TrainingSample],
    opts: &TrainOptions,
    mut log: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<TrainingReport> {
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let mut stop = EarlyStopState::new(opts.patience, opts.max_epochs)?;
    let mut records = Vec::new();
    let mut batch_losses = Vec::new();
    let mut epoch_val_mse = Vec::new();
    let seed = target.master_seed();

    let pre_training_val_mse = target.validation_mse(val, 0, opts.validation_chunk)?;

    let mut epoch = 0u64;
    while !stop.should_stop() {
        for plan in epoch_plan(seed, epoch, train.len(), opts.batch_size)? {
            let (loss, aggregate_checksums) = target.step(train, &plan)?;
            batch_losses.push(loss);
            let record = LogRecord::Batch {
                epoch,
                batch: plan.batch,
                loss,
                aggregate_checksums,
            };
            emit(&mut log, &record)?;
            records.push(record);
        }
        let val_mse = target.validation_mse(val, epoch, opts.validation_chunk)?;
        epoch_val_mse.push(val_mse);
        stop.observe(val_mse);
        let record = LogRecord::Epoch {
            epoch,
            val_mse,
            early_stop: stop.clone(),
        };
        emit(&mut log, &record)?;
        records.push(record);
        epoch += 1;
    }

    if let Some(path) = checkpoint {
        save_weights(path, &target.weights()?)?;
    }
    Ok(TrainingReport {
        records,
        pre_training_val_mse,
        epoch_val_mse,
        batch_losses,
        early_stop: stop,
        epochs_run: epoch as usize,
    })
}

fn emit(log: &mut Option<&mut dyn Write>, record: &LogRecord) -> Result<()> {
    if let Some(writer) = log {
        let line = serde_json::to_string(record).map_err(|e| Error::Codec(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
