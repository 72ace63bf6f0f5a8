//! Shared plumbing: logging, config loading, dataset/cluster assembly.

use splitqos::config::RunConfig;
use splitqos::data::{build_windows, generate_scenario, load_scenario, WindowedDataset};
use splitqos::model::load_weights;
use splitqos::protocol::Cluster;
use splitqos::topology::Topology;
use splitqos::{Error, Result};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

/// Environment variable controlling diagnostic output on stderr.
pub const LOG_ENV: &str = "SPLITQOS_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verbosity {
    Quiet,
    Info,
    Debug,
}

/// Verbosity from `SPLITQOS_LOG` (`quiet` | `info` | `debug`), default `info`.
/// Unknown values fall back to the default rather than failing the run.
pub fn verbosity() -> Verbosity {
    static LEVEL: OnceLock<Verbosity> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        match std::env::var(LOG_ENV).as_deref() {
            Ok("quiet") | Ok("QUIET") => Verbosity::Quiet,
            Ok("debug") | Ok("DEBUG") => Verbosity::Debug,
            _ => Verbosity::Info,
        }
    })
}

pub fn info(msg: &str) {
    if verbosity() >= Verbosity::Info {
        eprintln!("{msg}");
    }
}

pub fn debug(msg: &str) {
    if verbosity() >= Verbosity::Debug {
        eprintln!("debug: {msg}");
    }
}

/// Load a run configuration, or fall back to the built-in defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            debug(&format!("loading configuration from {}", p.display()));
            RunConfig::load(p)
        }
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

/// A resolved workload: the entity layout plus the windowed dataset, after
/// scenario generation (or loading) and normalization.
pub struct Workload {
    pub config: RunConfig,
    pub topology: Topology,
    pub dataset: WindowedDataset,
}

/// Generate the scenario described by `cfg` — or load one from `data_dir`,
/// in which case the on-disk scenario settings replace the configured ones
/// (whatever was generated governs the feature layout).
pub fn load_workload(mut cfg: RunConfig, data_dir: Option<&Path>) -> Result<Workload> {
    let scenario = match data_dir {
        Some(dir) => {
            let scenario = load_scenario(dir)?;
            debug(&format!(
                "loaded {} tables from {}",
                scenario.tables.len(),
                dir.display()
            ));
            cfg.data.scenario = scenario.config.clone();
            cfg.validate()?;
            scenario
        }
        None => generate_scenario(&cfg.data.scenario)?,
    };
    let topology = cfg.topology();
    let dataset = build_windows(&scenario, &topology, cfg.data.stride_ms, &cfg.split())?;
    debug(&format!(
        "windowed dataset: {} anchors, horizon {} steps",
        dataset.len(),
        dataset.horizon_steps()
    ));
    Ok(Workload {
        config: cfg,
        topology,
        dataset,
    })
}

/// Assemble the distributed deployment the configuration describes.
pub fn build_cluster(cfg: &RunConfig) -> Result<Cluster> {
    let model = cfg.model_config()?;
    let topology = cfg.topology();
    let mut cluster = Cluster::new(&model, &topology, cfg.training.master_seed, cfg.training.mode)?;
    cluster.set_timeout(Duration::from_secs(cfg.transport.timeout_s));
    Ok(cluster)
}

/// Load checkpoint weights, naming the file in any read failure.
pub fn load_checkpoint(path: &Path) -> Result<std::collections::BTreeMap<String, splitqos::Tensor>> {
    load_weights(path).map_err(|e| match e {
        Error::Io(io) => {
            Error::InvalidConfig(format!("cannot read checkpoint {}: {io}", path.display()))
        }
        other => other,
    })
}

/// Build a cluster and load trained weights into it.
pub fn restore_cluster(cfg: &RunConfig, checkpoint: &Path) -> Result<Cluster> {
    let weights = load_checkpoint(checkpoint)?;
    let mut cluster = build_cluster(cfg)?;
    cluster.restore(&weights)?;
    debug(&format!(
        "restored {} tensors from {}",
        weights.len(),
        checkpoint.display()
    ));
    Ok(cluster)
}

/// Serialize `value` as pretty JSON into `path` (with a trailing newline).
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Codec(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Read pretty or compact JSON from `path`.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Codec(format!("parsing {}: {e}", path.display())))
}
