use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use vibro_cli::{run, Command, RunConfig};

/// Simulation and grazing analysis of vibro-impact systems.
#[derive(Debug, Parser)]
#[command(name = "vibro", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir` in the configuration).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parameter points and seed searches.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed of the randomized robustness check.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Hybrid simulation: trajectory, impacts and a summary.
    Simulate,
    /// Periodic-orbit family continued toward grazing.
    Family,
    /// Limit matrices, conditions and asymptotics at grazing.
    GrazingReport,
    /// Manifolds, homoclinic points, Lyapunov exponent, periodic points.
    ChaosReport,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAZE_LOG", "warn")).init();
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Family => Command::Family,
        Cmd::GrazingReport => Command::GrazingReport,
        Cmd::ChaosReport => Command::ChaosReport,
    };
    let Some(path) = cli.config else {
        eprintln!("configuration error: --config is required");
        return ExitCode::from(1);
    };
    let mut cfg = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code());
        }
    };
    if let Some(seed) = cli.seed_override {
        cfg.grazing.get_or_insert_with(Default::default).seed = Some(seed);
    }
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("cannot start {jobs} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    let out = cli.out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match run(command, &cfg, &out) {
        Ok(files) => {
            for f in files {
                println!("{}  {}", f.sha256, out.join(&f.name).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            error!("{} failed: {e}", command.name());
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
