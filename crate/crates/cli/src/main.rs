use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser};
use leaky::experiment::{load_config, run_experiment, write_results, ExperimentError, Subcommand};

#[derive(Parser)]
#[command(name = "leaky", version, about = "Escape rates and limiting distributions of open dispersing billiards")]
enum Cli {
    /// Check the table, hole, sweep and tower in the config.
    ValidateGeometry(Common),
    /// Evolve an ensemble and record survivor counts.
    Simulate(Common),
    /// Fit the per-step survival ratio.
    EscapeRate(Common),
    /// Histogram of survivors at n_max with convergence diagnostics.
    SurvivorMeasure(Common),
    /// Escape rate and distance to the invariant measure along a shrinking hole family.
    SmallHoleSweep(Common),
    /// Invariant-measure mass of the first k_max hole images.
    SingularityDiag(Common),
    /// Leading eigenvalue of a tower transfer operator.
    TowerEig(Common),
    /// Eigenvalue lower bound and tail check for a tower.
    TowerBound(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; must exist.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides LEAKY_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

impl Cli {
    fn split(self) -> (Subcommand, Common) {
        match self {
            Cli::ValidateGeometry(c) => (Subcommand::ValidateGeometry, c),
            Cli::Simulate(c) => (Subcommand::Simulate, c),
            Cli::EscapeRate(c) => (Subcommand::EscapeRate, c),
            Cli::SurvivorMeasure(c) => (Subcommand::SurvivorMeasure, c),
            Cli::SmallHoleSweep(c) => (Subcommand::SmallHoleSweep, c),
            Cli::SingularityDiag(c) => (Subcommand::SingularityDiag, c),
            Cli::TowerEig(c) => (Subcommand::TowerEig, c),
            Cli::TowerBound(c) => (Subcommand::TowerBound, c),
        }
    }
}

fn threads(flag: Option<usize>) -> Result<usize, ExperimentError> {
    if let Some(k) = flag {
        return Ok(k);
    }
    match std::env::var("LEAKY_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| ExperimentError::Config(format!("LEAKY_THREADS={v} is not a count"))),
        // 0 lets rayon choose
        Err(_) => Ok(0),
    }
}

fn run(sub: Subcommand, args: Common) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = Some(out);
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads(args.threads)?)
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let artifact = pool.install(|| run_experiment(sub, &cfg))?;
    write_results(&artifact, &dir)
}

fn main() -> ExitCode {
    let (sub, args) = Cli::parse().split();
    match run(sub, args) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
