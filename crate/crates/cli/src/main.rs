use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jumptraj::config::{load_config, ExperimentConfig};
use jumptraj::experiment::{
    run_audit, run_convergence, run_replay, run_trajectories, AuditHooks, Outcome, ReplaySource,
};
use jumptraj::Error;

const WORKERS_ENV: &str = "JUMPTRAJ_WORKERS";

/// Jump-type quantum trajectory experiments.
#[derive(Parser)]
#[command(name = "jumptraj", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample exact trajectories and compare their mean with the master equation.
    Trajectories(Common),
    /// Measure convergence rates of the Euler scheme and the coupled chain.
    Convergence(Common),
    /// Run the invariant suite.
    Audit(Common),
    /// Re-run one realization through every process and compare step by step.
    Replay {
        #[command(flatten)]
        common: Common,
        /// Serialized realization to replay.
        #[arg(long, conflicts_with = "path")]
        realization: Option<PathBuf>,
        /// Path index to draw from the configured seed.
        #[arg(long, default_value_t = 0)]
        path: u64,
        /// Partition count (defaults to the smallest n in the grid).
        #[arg(long)]
        n: Option<u32>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    paths: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = load_config(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(dir) = &self.out {
            cfg.output.directory = dir.clone();
        }
        if let Some(paths) = self.paths {
            if paths < 1 {
                return Err(Error::config("--paths", "must be ≥ 1"));
            }
            cfg.run.n_paths = paths;
        }
        if let Ok(value) = std::env::var(WORKERS_ENV) {
            let workers = value
                .parse::<usize>()
                .ok()
                .filter(|&w| w >= 1)
                .ok_or_else(|| {
                    Error::config(
                        WORKERS_ENV,
                        format!("expected a positive integer, got {value:?}"),
                    )
                })?;
            cfg.run.workers = Some(workers);
        }
        if let Some(workers) = self.workers {
            if workers < 1 {
                return Err(Error::config("--workers", "must be ≥ 1"));
            }
            cfg.run.workers = Some(workers);
        }
        Ok(cfg)
    }
}

fn run(command: &Command) -> Result<Outcome, Error> {
    match command {
        Command::Trajectories(c) => run_trajectories(&c.load()?),
        Command::Convergence(c) => run_convergence(&c.load()?).map(|(outcome, _)| outcome),
        Command::Audit(c) => run_audit(&c.load()?, &AuditHooks::default()),
        Command::Replay {
            common,
            realization,
            path,
            n,
        } => {
            let source = match realization {
                Some(file) => ReplaySource::File(file.clone()),
                None => ReplaySource::Path(*path),
            };
            run_replay(&common.load()?, &source, *n)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            eprintln!("wrote {} files", outcome.files.len());
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
