use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mri_robust_harness::{config, pipeline, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(
    name = "mri-robust",
    version,
    about = "Undersampled MRI robustness experiments"
)]
struct Cli {
    /// JSON experiment config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the base seed and re-derives every seed from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the phantom dataset.
    Phantom,
    /// Train the denoiser, unrolled and score models.
    Train,
    /// Reconstruct the test split over the acceleration grid.
    Reconstruct,
    /// White-box perturbation sweeps over the epsilon grid.
    Attack,
    /// Evaluate perturbations from every source on every target.
    Transfer,
    /// Aggregate result CSVs into summaries and SVG plots.
    Report,
    /// Run every stage in order.
    Run,
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("--jobs: {e}")))?;
    }
    let cfg: ExperimentConfig = config::load(cli.config.as_deref(), std::env::vars(), cli.seed)?;
    let out: &Path = &cli.out;
    log::info!("config hash {}", cfg.hash());
    let stage = |name: &'static str, r: Result<(), HarnessError>| r.map_err(|e| e.in_stage(name));
    if !matches!(cli.command, Command::Run) {
        pipeline::write_config(&cfg, out)?;
    }
    match cli.command {
        Command::Phantom => stage("phantom", pipeline::phantom(&cfg, out).map(drop)),
        Command::Train => stage("train", pipeline::train(&cfg, out).map(drop)),
        Command::Reconstruct => stage("reconstruct", pipeline::reconstruct(&cfg, out).map(drop)),
        Command::Attack => stage("attack", pipeline::attack(&cfg, out).map(drop)),
        Command::Transfer => stage("transfer", pipeline::transfer(&cfg, out).map(drop)),
        Command::Report => stage("report", pipeline::report(&cfg, out).map(drop)),
        Command::Run => pipeline::run(&cfg, out).map(|r| {
            for t in &r.timings {
                log::info!("{}: {:.1}s", t.stage, t.seconds);
            }
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
