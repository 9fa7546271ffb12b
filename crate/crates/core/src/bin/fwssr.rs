use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fwssr::config::ExperimentConfig;
use fwssr::experiment::{self, SweepKnob};
use fwssr::trainer::Mode;

#[derive(Parser)]
#[command(name = "fwssr", version, about = "Safety subspace regularization experiments on a toy guard classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML or JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the probe, task and evaluation sets as CSV.
    GenData(Common),
    /// Pretrain the aligned anchor and save it as `anchor.fwtm`.
    Pretrain(Common),
    /// Fine-tune from the anchor under one condition.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "fwssr")]
        mode: Mode,
        /// Anchor checkpoint; overrides the config's `anchor`.
        #[arg(long)]
        anchor: Option<PathBuf>,
    },
    /// Compare run directories and write comparison and heatmap CSVs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run all conditions over knob values and the configured seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        knob: SweepKnob,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn load(common: &Common) -> fwssr::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &common.overrides {
        cfg.set(o)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.resolve()
}

fn execute(cli: Cli) -> fwssr::Result<serde_json::Value> {
    Ok(match cli.command {
        Command::GenData(common) => {
            let cfg = load(&common)?;
            experiment::gen_data_to_dir(&cfg)?;
            serde_json::json!({ "out": cfg.out })
        }
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            let (path, report) = experiment::pretrain_to_dir(&cfg)?;
            serde_json::json!({ "anchor": path, "pretrain": report })
        }
        Command::Run { common, mode, anchor } => {
            let mut cfg = load(&common)?;
            if anchor.is_some() {
                cfg.anchor = anchor;
            }
            let summary = experiment::run_to_dir(&cfg, mode)?;
            serde_json::to_value(summary)?
        }
        Command::Report { runs, out } => {
            let cmp = experiment::report(&runs, &out)?;
            serde_json::to_value(cmp.rows)?
        }
        Command::Sweep { common, knob, values } => {
            let cfg = load(&common)?;
            let summary = experiment::sweep(&cfg, knob, &values, &cfg.out)?;
            serde_json::to_value(summary)?
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FWSSR_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let diag = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{diag}");
            ExitCode::FAILURE
        }
    }
}
