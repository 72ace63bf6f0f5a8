//! `splitqos train` — run the synchronized training rounds and checkpoint
//! the result.

use crate::files::{self, TrainSummary};
use crate::util;
use clap::{Args, ValueEnum};
use splitqos::data::SplitTag;
use splitqos::model::build_centralized_monolith;
use splitqos::protocol::{
    run_centralized_training, run_training, weight_checksum, SchedulerMode, TrainingReport,
};
use splitqos::{Error, Result};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    /// Single thread, fixed actor order; bitwise reproducible.
    Deterministic,
    /// One thread per worker; same numbers, concurrent execution.
    Threaded,
}

impl From<ModeArg> for SchedulerMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Deterministic => SchedulerMode::Deterministic,
            ModeArg::Threaded => SchedulerMode::Threaded,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Load a stored scenario instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Override the training master seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Override the scheduler mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,

    /// Train the single-process reference model instead of the distributed
    /// deployment (requires one worker per entity).
    #[arg(long)]
    centralized: bool,

    /// Run directory for the log, checkpoint, and summary.
    #[arg(long, short, default_value = "run")]
    out: PathBuf,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut cfg = util::load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.training.master_seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.training.mode = mode.into();
    }

    let workload = util::load_workload(cfg, args.data.as_deref())?;
    let cfg = &workload.config;
    let train = workload.dataset.samples(SplitTag::Train)?;
    let val = workload.dataset.samples(SplitTag::Val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(format!(
            "training needs non-empty train and validation splits, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    util::info(&format!(
        "training on {} windows, validating on {} ({} entities, {} workers, seed {})",
        train.len(),
        val.len(),
        workload.topology.nets.len(),
        workload.topology.total_workers(),
        cfg.training.master_seed
    ));

    std::fs::create_dir_all(&args.out)?;
    let log_path = args.out.join(files::TRAIN_LOG);
    let checkpoint = args.out.join(files::CHECKPOINT);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let opts = cfg.train_options();

    let started = Instant::now();
    let report = if args.centralized {
        let mut model =
            build_centralized_monolith(&cfg.model_config()?, &workload.topology, cfg.training.master_seed)?;
        run_centralized_training(
            &mut model,
            cfg.training.master_seed,
            &train,
            &val,
            &opts,
            Some(&mut log),
            Some(&checkpoint),
        )?
    } else {
        let mut cluster = util::build_cluster(cfg)?;
        run_training(&mut cluster, &train, &val, &opts, Some(&mut log), Some(&checkpoint))?
    };
    log.flush()?;
    let wall_s = started.elapsed().as_secs_f64();

    let summary = summarize(&report, cfg.training.master_seed, cfg.training.mode, args.centralized, &checkpoint, wall_s)?;
    util::write_json(&args.out.join(files::TRAIN_SUMMARY), &summary)?;
    std::fs::write(args.out.join(files::RESOLVED_CONFIG), cfg.to_toml_string()?)?;

    for (epoch, mse) in report.epoch_val_mse.iter().enumerate() {
        util::debug(&format!("epoch {}: validation mse {mse:.6e}", epoch + 1));
    }
    util::info(&format!(
        "{} epochs in {wall_s:.1}s: validation mse {:.6e} -> {:.6e} (best {:.6e}), checkpoint {}",
        summary.epochs_run,
        summary.pre_training_val_mse,
        summary.final_val_mse,
        summary.best_val_mse,
        summary.checkpoint_checksum
    ));
    Ok(())
}

fn summarize(
    report: &TrainingReport,
    master_seed: u64,
    mode: SchedulerMode,
    centralized: bool,
    checkpoint: &std::path::Path,
    wall_s: f64,
) -> Result<TrainSummary> {
    let weights = crate::util::load_checkpoint(checkpoint)?;
    let final_val_mse = report
        .epoch_val_mse
        .last()
        .copied()
        .unwrap_or(report.pre_training_val_mse);
    Ok(TrainSummary {
        master_seed,
        mode,
        centralized,
        epochs_run: report.epochs_run,
        batches_run: report.batch_losses.len(),
        pre_training_val_mse: report.pre_training_val_mse,
        final_val_mse,
        best_val_mse: report.early_stop.best_val_mse.unwrap_or(final_val_mse),
        early_stop: report.early_stop.clone(),
        checkpoint_checksum: weight_checksum(&weights),
        wall_s,
    })
}
