use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fairdrop::experiment::{self, ExperimentConfig, SweepConfig};
use fairdrop::seed::Seeds;
use fairdrop::{Result, SyntheticSpec};

/// Example-tied dropout experiments on synthetic group-shifted data.
#[derive(Debug, Parser)]
#[command(name = "fairdrop", version)]
struct Cli {
    /// Root seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true, env = "FAIRDROP_OUT")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train/val/test CSVs and group statistics from a data spec.
    GenData,
    /// Train a model; writes a checkpoint and per-epoch history.
    Train,
    /// Localize critical neurons for sampled minority and majority examples.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every grid point and rank by validation worst-class accuracy.
    Sweep,
    /// Evaluate a checkpoint per group on every split and mode.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn config_path(cli: &Cli) -> Result<&PathBuf> {
    cli.config
        .as_ref()
        .ok_or_else(|| fairdrop::Error::Config("--config is required".into()))
}

fn experiment(cli: &Cli) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(config_path(cli)?)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let path = config_path(cli)?;
            let text = std::fs::read_to_string(path)?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text)?;
            if let Some(s) = cli.seed {
                spec.seed = Seeds::from_root(s).data;
            }
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            for p in experiment::cmd_gen_data(&spec, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train => {
            let (cfg, out) = experiment(cli)?;
            let res = experiment::cmd_train(&cfg, &out)?;
            println!(
                "trained {} epochs; checkpoint in {}",
                res.history.epochs.len(),
                out.display()
            );
        }
        Command::Probe { checkpoint } => {
            let (cfg, out) = experiment(cli)?;
            let res = experiment::cmd_probe(&cfg, checkpoint, &out)?;
            for w in &res.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "probed {} examples into {}",
                res.report.rows.len(),
                out.display()
            );
        }
        Command::Sweep => {
            let mut cfg = SweepConfig::load(config_path(cli)?)?;
            if let Some(s) = cli.seed {
                cfg.experiment.seed = s;
            }
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.experiment.out_dir.clone());
            let rows = experiment::cmd_sweep(&cfg, &out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "swept {} configs ({failed} failed) into {}",
                rows.len(),
                out.display()
            );
        }
        Command::Report { checkpoint } => {
            let (cfg, out) = experiment(cli)?;
            experiment::cmd_report(&cfg, checkpoint, &out)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
