use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rwinit::experiment::{run, ExperimentConfig, ExperimentKind, RunReport};

/// Random-walk initialization experiments.
///
/// Exit status: 0 when every cell completed, 2 when some cells failed (the
/// reasons are printed and recorded in the output CSVs), 1 on any other
/// error.
#[derive(Parser)]
#[command(name = "rwinit", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Random-walk ensembles of ln Z with predicted values alongside.
    Walk(Common),
    /// Training error over a grid of gains, depths and learning rates.
    GSweep(Common),
    /// Training error per depth and learning-rate pair, averaged over gains.
    DepthSweep(Common),
    /// A single training run.
    TrainOnce(Common),
    /// Finite-difference gradient checks on small random networks.
    GradientCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used for everything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: the config's output_dir, else runs/<verb>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

impl Verb {
    fn split(self) -> (ExperimentKind, Common) {
        match self {
            Verb::Walk(c) => (ExperimentKind::Walk, c),
            Verb::GSweep(c) => (ExperimentKind::GSweep, c),
            Verb::DepthSweep(c) => (ExperimentKind::DepthSweep, c),
            Verb::TrainOnce(c) => (ExperimentKind::TrainOnce, c),
            Verb::GradientCheck(c) => (ExperimentKind::GradientCheck, c),
        }
    }
}

fn execute(kind: ExperimentKind, args: Common) -> anyhow::Result<Option<RunReport>> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(kind),
    };
    if cfg.kind != kind {
        anyhow::bail!("config describes a '{}' run but the verb is '{kind}'", cfg.kind);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    let cfg = cfg.resolve()?;
    if args.print_config {
        print!("{}", cfg.to_toml_string()?);
        return Ok(None);
    }
    let out = args
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
    let report = run(&cfg, &out).with_context(|| format!("{kind} run into {}", out.display()))?;
    Ok(Some(report))
}

fn main() -> ExitCode {
    let (kind, args) = Cli::parse().verb.split();
    match execute(kind, args) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(report)) => {
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if report.all_ok() {
                println!("{} of {} cells completed", report.cells, report.cells);
                ExitCode::SUCCESS
            } else {
                for (i, reason) in &report.failed {
                    eprintln!("cell {i} failed: {reason}");
                }
                eprintln!("{} of {} cells failed", report.failed.len(), report.cells);
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
