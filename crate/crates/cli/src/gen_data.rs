//! `splitqos gen-data` — synthesize a driving scenario and persist it.

use crate::util;
use clap::Args;
use splitqos::data::{generate_scenario, save_scenario, table_to_csv};
use splitqos::Result;
use std::path::PathBuf;

#[derive(Args)]
pub struct GenDataArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the scenario seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,

    /// Directory to write the scenario into (created if missing).
    #[arg(long, short)]
    out: PathBuf,

    /// Also export each table as CSV next to its binary form.
    #[arg(long)]
    csv: bool,
}

pub fn run(args: GenDataArgs) -> Result<()> {
    let mut cfg = util::load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.data.scenario.seed = seed;
    }

    let scenario = generate_scenario(&cfg.data.scenario)?;
    save_scenario(&args.out, &scenario)?;

    if args.csv {
        for ((net, worker), table) in &scenario.tables {
            let path = args.out.join(format!("{net}/{worker}.csv"));
            std::fs::write(&path, table_to_csv(table))?;
        }
    }

    let rows: usize = scenario.tables.values().map(|t| t.n_samples()).sum();
    util::info(&format!(
        "wrote {} tables ({rows} rows, seed {}) to {}",
        scenario.tables.len(),
        scenario.config.seed,
        args.out.display()
    ));
    Ok(())
}
