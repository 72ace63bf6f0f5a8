//! `splitqos report` — summarize run directories side by side.

use crate::files::{self, AttackReportFile, EvalReportFile, TrainSummary};
use crate::util;
use clap::Args;
use splitqos::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Fixed schema of the cross-run summary CSV.
const HEADER: &str =
    "run,epochs,final_val_mse,overall_mae_mbps,persistence_mae_mbps,improvement_percent,mean_similarity,max_similarity";

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories, each as written by train / eval / attack.
    #[arg(required = true)]
    runs: Vec<PathBuf>,

    /// Also write the summary CSV to this file.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Default)]
struct Row {
    run: String,
    epochs: Option<usize>,
    final_val_mse: Option<f64>,
    overall_mae: Option<f64>,
    persistence_mae: Option<f64>,
    improvement: Option<f64>,
    mean_similarity: Option<f64>,
    max_similarity: Option<f64>,
}

pub fn run(args: ReportArgs) -> Result<()> {
    let mut rows = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        rows.push(collect(dir)?);
    }

    let mut csv = String::from(HEADER);
    csv.push('\n');
    for row in &rows {
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.run,
            opt(row.epochs),
            opt(row.final_val_mse),
            opt(row.overall_mae),
            opt(row.persistence_mae),
            opt(row.improvement),
            opt(row.mean_similarity),
            opt(row.max_similarity)
        )
        .map_err(|e| Error::Codec(e.to_string()))?;
    }

    print!("{csv}");
    if let Some(path) = &args.out {
        std::fs::write(path, &csv)?;
        util::info(&format!("wrote {} run summaries to {}", rows.len(), path.display()));
    }
    Ok(())
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Pull whatever artifacts the directory holds into one row.
fn collect(dir: &Path) -> Result<Row> {
    let mut row = Row {
        run: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string()),
        ..Row::default()
    };
    let mut found = false;

    let summary = dir.join(files::TRAIN_SUMMARY);
    if summary.is_file() {
        let s: TrainSummary = util::read_json(&summary)?;
        row.epochs = Some(s.epochs_run);
        row.final_val_mse = Some(s.final_val_mse);
        found = true;
    }
    let metrics = dir.join(files::METRICS_JSON);
    if metrics.is_file() {
        let m: EvalReportFile = util::read_json(&metrics)?;
        row.overall_mae = Some(m.model.overall_mae);
        row.persistence_mae = Some(m.persistence.overall_mae);
        row.improvement = Some(m.improvement_percent);
        found = true;
    }
    let privacy = dir.join(files::PRIVACY_JSON);
    if privacy.is_file() {
        let p: AttackReportFile = util::read_json(&privacy)?;
        let entities = p.entities.len() as f64;
        if entities > 0.0 {
            row.mean_similarity = Some(
                p.entities.values().map(|e| e.summary.mean_similarity).sum::<f64>() / entities,
            );
            row.max_similarity = Some(
                p.entities
                    .values()
                    .map(|e| e.summary.max_similarity)
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
        found = true;
    }

    if !found {
        return Err(Error::Dataset(format!(
            "{} holds no run artifacts ({}, {}, or {})",
            dir.display(),
            files::TRAIN_SUMMARY,
            files::METRICS_JSON,
            files::PRIVACY_JSON
        )));
    }
    Ok(row)
}
