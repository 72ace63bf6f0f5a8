//! Shared fixtures for the pipeline benchmarks: a small but structurally
//! faithful deployment (three entity classes, two vehicles, BiLSTM
//! encoders) driven by the real scenario generator.

use splitqos::config::RunConfig;
use splitqos::data::SplitTag;
use splitqos::model::TrainingSample;
use splitqos::protocol::Cluster;
use splitqos::topology::Topology;

/// A reduced run: short scenario, 16-unit encoders, 10-step horizon.
pub fn bench_config() -> RunConfig {
    RunConfig::from_toml_str(
        r#"
        version = 1

        [data]
        stride_ms = 1000
        history_steps = 25

        [data.scenario]
        duration_s = 240
        n_tod_ues = 2
        seed = 7

        [timing]
        horizon_steps = 10

        [model]
        encoder_units = 16
        decoder_units = 24
        head_width = 16

        [training]
        master_seed = 42
        batch_size = 16
        "#,
    )
    .expect("benchmark configuration is valid")
}

/// Generate the scenario and window it into training samples.
pub fn bench_workload(cfg: &RunConfig) -> (Topology, Vec<TrainingSample>) {
    let scenario = splitqos::data::generate_scenario(&cfg.data.scenario).expect("scenario");
    let topology = cfg.topology();
    let dataset =
        splitqos::data::build_windows(&scenario, &topology, cfg.data.stride_ms, &cfg.split())
            .expect("windows");
    let samples = dataset.samples(SplitTag::Train).expect("train split");
    (topology, samples)
}

/// A fresh deployment for the benchmark configuration.
pub fn bench_cluster(cfg: &RunConfig) -> Cluster {
    Cluster::new(
        &cfg.model_config().expect("model config"),
        &cfg.topology(),
        cfg.training.master_seed,
        cfg.training.mode,
    )
    .expect("cluster")
}
