//! `splitqos eval` — score a checkpoint against the persistence baseline.
//!
//! Besides the local mode, the command can split the deployment across two
//! processes: `--listen` serves the coordinator half (merging layer plus
//! decoder), `--connect` runs the worker half (the encoders) and streams
//! only context vectors over the socket — raw feature windows never leave
//! the client, and the frame codec rejects any payload that tries.
//!
//! The socket dialogue is a sequence of control frames: the client sends
//! one `predict` frame per window (payload `context/<net>/<worker>`, the
//! window anchor in the batch field), the server answers with a
//! `prediction` frame (payload `ic<id>`, one forecast per merging group),
//! and a final `done` frame ends the session.

use crate::files::{self, EvalReportFile};
use crate::util;
use clap::{Args, ValueEnum};
use splitqos::data::{load_scenario, SplitTag};
use splitqos::eval::{forecast_metrics, paired_predictions, persistence_predictions, write_csv};
use splitqos::model::TrainingSample;
use splitqos::protocol::Cluster;
use splitqos::tensor::Tensor;
use splitqos::topology::{NetId, WorkerId};
use splitqos::transport::{read_frame, write_frame, Endpoint, Envelope, MsgType, Phase, StreamTransport};
use splitqos::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::TcpListener;
use std::path::PathBuf;

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn tag(self) -> SplitTag {
        match self {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Val => SplitTag::Val,
            SplitArg::Test => SplitTag::Test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

/// The client's endpoint label on the evaluation socket.
const CLIENT: Endpoint = (NetId(0), WorkerId(0));

#[derive(Args)]
pub struct EvalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Load a stored scenario instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,

    /// Trained weights to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,

    /// Dataset split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,

    /// Run directory for metrics.json and metrics.csv.
    #[arg(long, short, default_value = "run")]
    out: PathBuf,

    /// Serve the coordinator half on this address (one client, then exit).
    /// Prints `listening on <addr>` once the socket is bound.
    #[arg(long, conflicts_with = "connect")]
    listen: Option<String>,

    /// Encode locally but merge and decode on the server at this address.
    #[arg(long)]
    connect: Option<String>,
}

pub fn run(args: EvalArgs) -> Result<()> {
    if let Some(addr) = args.listen.clone() {
        return serve(&args, &addr);
    }

    let cfg = util::load_config(args.config.as_deref())?;
    let workload = util::load_workload(cfg, args.data.as_deref())?;
    let cluster = util::restore_cluster(&workload.config, &args.checkpoint)?;
    let tag = args.split.tag();
    let samples = workload.dataset.samples(tag)?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "the {} split holds no windows",
            args.split.name()
        )));
    }

    let (predictions, truths) = match args.connect.as_deref() {
        Some(addr) => remote_predictions(&cluster, &samples, addr)?,
        None => paired_predictions(&samples, |s| cluster.predict(s))?,
    };

    // Every window is scored once per merging group, so the persistence
    // baseline is expanded the same way to keep the pair counts aligned.
    let groups_per_sample = predictions.len() / samples.len();
    let mut last_observed = Vec::with_capacity(predictions.len());
    for &idx in &workload.dataset.indices(tag) {
        let v = workload.dataset.last_observed_target(idx)?;
        for _ in 0..groups_per_sample {
            last_observed.push(v);
        }
    }
    let persistence = persistence_predictions(&last_observed, workload.dataset.horizon_steps());

    let denorm = |v: f64| workload.dataset.denormalize_target(v);
    let step_ms = workload.dataset.prediction_step_ms();
    let model_report = forecast_metrics(&predictions, &truths, denorm, step_ms)?;
    let persistence_report = forecast_metrics(&persistence, &truths, denorm, step_ms)?;

    let improvement_percent = if persistence_report.overall_mae > 0.0 {
        100.0 * (1.0 - model_report.overall_mae / persistence_report.overall_mae)
    } else {
        0.0
    };

    std::fs::create_dir_all(&args.out)?;
    let mut csv = Vec::new();
    write_csv(&model_report, &mut csv)?;
    std::fs::write(args.out.join(files::METRICS_CSV), csv)?;
    let report = EvalReportFile {
        split: args.split.name().to_string(),
        model: model_report,
        persistence: persistence_report,
        improvement_percent,
    };
    util::write_json(&args.out.join(files::METRICS_JSON), &report)?;

    announce(&args, &report);
    Ok(())
}

fn announce(args: &EvalArgs, report: &EvalReportFile) {
    let source = match args.connect.as_deref() {
        Some(addr) => format!(" via {addr}"),
        None => String::new(),
    };
    util::info(&format!(
        "{} split{source}: model MAE {:.4} Mbps (final step {:.4}) vs persistence {:.4} -> {:.2}% better over {} pairs",
        report.split,
        report.model.overall_mae,
        report.model.final_step_mae,
        report.persistence.overall_mae,
        report.improvement_percent,
        report.model.pairs
    ));
}

/// Build a control frame for the evaluation dialogue.
fn control(
    sender: Endpoint,
    receiver: Endpoint,
    batch: u64,
    note: &str,
    payload: Vec<(String, Tensor)>,
) -> Result<Envelope> {
    let mut env = Envelope::new(MsgType::Control, 0, batch, Phase::Control, sender, receiver, payload)?;
    env.note = Some(note.to_string());
    Ok(env)
}

/// Worker half: encode each window locally, send only the context rows,
/// collect the server's forecasts in merging-group order.
fn remote_predictions(
    cluster: &Cluster,
    samples: &[TrainingSample],
    addr: &str,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut transport = StreamTransport::connect(addr)?;
    util::debug(&format!("connected to {}", transport.peer_addr()?));
    let server = cluster.coordinator();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();

    for sample in samples {
        let payload: Vec<(String, Tensor)> = cluster
            .contexts_for(sample)?
            .into_iter()
            .map(|((net, worker), row)| (format!("context/{net}/{worker}"), row))
            .collect();
        transport.send(&control(CLIENT, server, sample.anchor, "predict", payload)?)?;

        let reply = transport.recv()?;
        if reply.note.as_deref() != Some("prediction") || reply.batch != sample.anchor {
            return Err(Error::Protocol(format!(
                "expected a prediction for anchor {}, got note {:?} batch {}",
                sample.anchor, reply.note, reply.batch
            )));
        }
        let mut groups: Vec<(u32, Tensor)> = Vec::with_capacity(reply.payload.len());
        for (name, tensor) in reply.payload {
            let id: u32 = name
                .strip_prefix("ic")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::Protocol(format!("malformed forecast tensor name {name:?}"))
                })?;
            groups.push((id, tensor));
        }
        groups.sort_by_key(|(id, _)| *id);
        for (_, tensor) in groups {
            predictions.push(tensor);
            truths.push(sample.target.clone());
        }
    }

    transport.send(&control(CLIENT, server, 0, "done", Vec::new())?)?;
    Ok((predictions, truths))
}

/// Coordinator half: hold the merging layer and decoder, answer context
/// frames with forecasts, never see a feature window.
fn serve(args: &EvalArgs, addr: &str) -> Result<()> {
    let mut cfg = util::load_config(args.config.as_deref())?;
    if let Some(dir) = args.data.as_deref() {
        cfg.data.scenario = load_scenario(dir)?.config;
        cfg.validate()?;
    }
    let cluster = util::restore_cluster(&cfg, &args.checkpoint)?;

    let listener = TcpListener::bind(addr)?;
    println!("listening on {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    let (mut stream, peer) = listener.accept()?;
    util::info(&format!("serving {peer}"));

    let mut served = 0usize;
    loop {
        let env = read_frame(&mut stream)?;
        match env.note.as_deref() {
            Some("predict") => {
                let contexts = parse_contexts(&env)?;
                let payload: Vec<(String, Tensor)> = cluster
                    .predict_from_contexts(&contexts, env.batch)?
                    .into_iter()
                    .map(|(id, tensor)| (format!("ic{id}"), tensor))
                    .collect();
                let reply = control(cluster.coordinator(), env.sender, env.batch, "prediction", payload)?;
                write_frame(&mut stream, &reply)?;
                served += 1;
            }
            Some("done") => break,
            other => {
                return Err(Error::Protocol(format!(
                    "unexpected control note {other:?} on the evaluation socket"
                )))
            }
        }
    }
    util::info(&format!("served {served} forecasts to {peer}"));
    Ok(())
}

/// Decode `context/<net>/<worker>` payload names back into endpoints.
fn parse_contexts(env: &Envelope) -> Result<BTreeMap<Endpoint, Tensor>> {
    let mut contexts = BTreeMap::new();
    for (name, tensor) in &env.payload {
        let endpoint = parse_context_name(name).ok_or_else(|| {
            Error::Protocol(format!("malformed context tensor name {name:?}"))
        })?;
        contexts.insert(endpoint, tensor.clone());
    }
    Ok(contexts)
}

fn parse_context_name(name: &str) -> Option<Endpoint> {
    let rest = name.strip_prefix("context/")?;
    let (net, worker) = rest.split_once('/')?;
    let net: u32 = net.strip_prefix("net")?.parse().ok()?;
    let worker: u32 = worker.strip_prefix("worker")?.parse().ok()?;
    Some((NetId(net), WorkerId(worker)))
}
