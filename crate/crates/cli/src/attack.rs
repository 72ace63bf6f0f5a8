//! `splitqos attack` — input reconstruction against published contexts.
//!
//! Plays the honest-but-curious receiver: armed with an entity's encoder
//! weights (they circulate during training) and the context vectors it
//! publishes, gradient-descend a window estimate until the encoder maps it
//! onto the observed context, then score how close the estimate landed to
//! the true private window.

use crate::files::{self, AttackReportFile, EntityReport, FeatureRow, TargetReport};
use crate::util;
use clap::Args;
use splitqos::data::window::TARGET_FEATURE;
use splitqos::data::SplitTag;
use splitqos::model::Encoder;
use splitqos::privacy::{attack_windows, AttackConfig, EntityPrivacy, WindowAttack};
use splitqos::rng::seeded_rng;
use splitqos::tensor::Tensor;
use splitqos::topology::{NetDescriptor, WorkerId};
use splitqos::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Args)]
pub struct AttackArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Load a stored scenario instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Trained weights whose encoders are attacked.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Windows attacked per entity, spread over the test split.
    #[arg(long, default_value_t = 3)]
    windows: usize,

    /// Cap on gradient steps per window.
    #[arg(long)]
    iters: Option<usize>,

    /// Seed for the uniform initial estimates.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Run directory for privacy.json and privacy.txt.
    #[arg(long, short, default_value = "run")]
    out: PathBuf,
}

pub fn run(args: AttackArgs) -> Result<()> {
    if args.windows == 0 {
        return Err(Error::InvalidConfig("need at least one window to attack".into()));
    }
    let cfg = util::load_config(args.config.as_deref())?;
    let workload = util::load_workload(cfg, args.data.as_deref())?;
    let weights = util::load_checkpoint(&args.checkpoint)?;
    let model_cfg = workload.config.model_config()?;

    let samples = workload.dataset.samples(SplitTag::Test)?;
    if samples.is_empty() {
        return Err(Error::Dataset("the test split holds no windows".into()));
    }
    let chosen = spread(samples.len(), args.windows);

    let attack_cfg = AttackConfig {
        seed: args.seed,
        max_iters: args.iters.unwrap_or_else(|| AttackConfig::default().max_iters),
        ..AttackConfig::default()
    };

    let mut entities = BTreeMap::new();
    for net in &workload.topology.nets {
        let spec = model_cfg.encoders.get(&net.net_id).ok_or_else(|| {
            Error::InvalidConfig(format!("no encoder configured for {}", net.net_id))
        })?;
        let mut encoder = Encoder::new(spec, net.history_steps, &mut seeded_rng(args.seed, "attack/init"))?;
        encoder.set_params(&entity_weights(&weights, &net.net_id.to_string())?)?;

        // Worker 1 exists in every entity class; its published contexts are
        // recomputed from the same weights the attacker observed.
        let mut anchors = Vec::with_capacity(chosen.len());
        let mut windows = Vec::with_capacity(chosen.len());
        let mut contexts = Vec::with_capacity(chosen.len());
        for &i in &chosen {
            let sample = &samples[i];
            let window = sample
                .windows
                .get(&(net.net_id, WorkerId(1)))
                .ok_or_else(|| {
                    Error::Dataset(format!("{} has no worker1 window", net.net_id))
                })?;
            anchors.push(sample.anchor);
            contexts.push(encoder.context_values(window)?);
            windows.push(window.clone());
        }
        let pairs: Vec<(&Tensor, &Tensor)> = windows.iter().zip(contexts.iter()).collect();
        let attacks = attack_windows(&mut encoder, &pairs, &attack_cfg)?;
        let summary = EntityPrivacy::from_attacks(&attacks)?;
        entities.insert(
            net.net_id.to_string(),
            entity_report(net, summary, &attacks, &anchors),
        );
    }

    let report = AttackReportFile {
        seed: args.seed,
        max_iters: attack_cfg.max_iters,
        windows_per_entity: chosen.len(),
        entities,
    };

    std::fs::create_dir_all(&args.out)?;
    util::write_json(&args.out.join(files::PRIVACY_JSON), &report)?;
    let text = render_text(&report)?;
    std::fs::write(args.out.join(files::PRIVACY_TEXT), &text)?;
    print!("{text}");
    Ok(())
}

/// Indices of `n` windows spread evenly over `len` candidates.
fn spread(len: usize, n: usize) -> Vec<usize> {
    let n = n.min(len);
    (0..n).map(|i| i * len / n).collect()
}

/// Extract `<prefix>/...`-named tensors and drop the prefix.
fn entity_weights(weights: &BTreeMap<String, Tensor>, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
    let subset: BTreeMap<String, Tensor> = weights
        .iter()
        .filter_map(|(name, t)| {
            let rest = name.strip_prefix(prefix)?.strip_prefix('/')?;
            Some((rest.to_string(), t.clone()))
        })
        .collect();
    if subset.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint holds no weights for {prefix}"
        )));
    }
    Ok(subset)
}

fn entity_report(
    net: &NetDescriptor,
    summary: EntityPrivacy,
    attacks: &[WindowAttack],
    anchors: &[u64],
) -> EntityReport {
    let features = net
        .features
        .iter()
        .zip(&summary.mean_feature_similarity)
        .map(|(name, &mean_similarity)| FeatureRow {
            name: name.clone(),
            mean_similarity,
            // The forecast KPI itself is broadcast anyway; reconstructing it
            // reveals nothing that was meant to stay local.
            sensitive: name != TARGET_FEATURE,
        })
        .collect();
    let targets = attacks
        .iter()
        .zip(anchors)
        .map(|(attack, &anchor_ms)| TargetReport {
            anchor_ms,
            context_distance: attack.result.context_distance,
            iterations: attack.result.iterations,
            converged: attack.result.converged,
            input_distance: attack.input_distance,
            similarity: attack.similarity,
            trajectory: attack.result.trajectory.clone(),
        })
        .collect();
    EntityReport {
        name: net.name.clone(),
        summary,
        features,
        targets,
    }
}

/// The human-readable report: similarity table, per-feature breakdown, and
/// each target's objective trajectory.
fn render_text(report: &AttackReportFile) -> Result<String> {
    let mut out = String::new();
    let w = |e: std::fmt::Error| Error::Codec(e.to_string());
    writeln!(
        out,
        "context reconstruction attack: seed {}, cap {} iterations, {} windows per entity\n",
        report.seed, report.max_iters, report.windows_per_entity
    )
    .map_err(w)?;

    writeln!(
        out,
        "{:<10} {:>8} {:>12} {:>10} {:>10} {:>14}",
        "entity", "attacks", "mean u", "mean S", "max S", "mean d"
    )
    .map_err(w)?;
    for (id, entity) in &report.entities {
        let s = &entity.summary;
        writeln!(
            out,
            "{:<10} {:>8} {:>12.4} {:>10.2} {:>10.2} {:>14.3e}",
            id,
            s.attacks,
            s.mean_input_distance,
            s.mean_similarity,
            s.max_similarity,
            s.mean_context_distance
        )
        .map_err(w)?;
    }

    for (id, entity) in &report.entities {
        writeln!(out, "\nentity {id} ({})", entity.name).map_err(w)?;
        writeln!(out, "  per-feature mean similarity:").map_err(w)?;
        for row in &entity.features {
            writeln!(
                out,
                "    {:<24} {:>8.2}  {}",
                row.name,
                row.mean_similarity,
                if row.sensitive { "sensitive" } else { "public KPI" }
            )
            .map_err(w)?;
        }
        for target in &entity.targets {
            writeln!(
                out,
                "  window @ {} ms: d {:.3e} after {} iterations ({}), u {:.4}, S {:.2}",
                target.anchor_ms,
                target.context_distance,
                target.iterations,
                if target.converged { "converged" } else { "iteration cap" },
                target.input_distance,
                target.similarity
            )
            .map_err(w)?;
            writeln!(out, "    objective trajectory (iteration: best d):").map_err(w)?;
            for chunk in target.trajectory.chunks(4) {
                let line: Vec<String> = chunk
                    .iter()
                    .map(|(it, d)| format!("{it:>7}: {d:.3e}"))
                    .collect();
                writeln!(out, "      {}", line.join("   ")).map_err(w)?;
            }
        }
    }
    Ok(out)
}
