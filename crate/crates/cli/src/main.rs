//! `drypar` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 validation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drypar_cli::config::{PipelineConfig, PRESET_PAPER5};
use drypar_cli::pipeline::Pipeline;
use drypar_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(
    name = "drypar",
    about = "Drying-particle pipeline: simulation, model reduction, observability analysis and state estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named built-in preset (default when no config file is given).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "drypar-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-volume drying runs and the total-moisture series.
    Simulate(CommonArgs),
    /// POD basis and singular-value spectrum from the training run.
    Pod(CommonArgs),
    /// Reduced-order trajectories and error report against the full model.
    Rom(CommonArgs),
    /// Reduced observability Gramian and the order-convergence study.
    Gramian(CommonArgs),
    /// Single-cell observability measure over every surface cell.
    Sweep(CommonArgs),
    /// Extended Kalman filter scenarios against synthetic measurements.
    Ekf(CommonArgs),
    /// Invariant and oracle checks; nonzero exit on any failure.
    Validate {
        #[command(flatten)]
        common: CommonArgs,
        /// Run only the linear Gramian oracle subset.
        #[arg(long)]
        linear_only: bool,
    },
}

fn load_config(common: &CommonArgs) -> CliResult<PipelineConfig> {
    match (&common.config, &common.preset) {
        (Some(path), _) => PipelineConfig::from_path(path),
        (None, Some(name)) => PipelineConfig::from_preset(name),
        (None, None) => PipelineConfig::from_preset(PRESET_PAPER5),
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("DRYPAR_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads > 0 {
                // Ignore the error if a global pool already exists.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        } else {
            eprintln!("warning: ignoring non-numeric DRYPAR_THREADS value '{value}'");
        }
    }
}

fn run() -> CliResult<()> {
    let cli = Cli::parse();
    init_thread_pool();
    let (common, action): (&CommonArgs, fn(&mut Pipeline) -> CliResult<()>) = match &cli.command {
        Command::Simulate(c) => (c, |p| p.simulate()),
        Command::Pod(c) => (c, |p| p.pod()),
        Command::Rom(c) => (c, |p| p.rom()),
        Command::Gramian(c) => (c, |p| p.gramian()),
        Command::Sweep(c) => (c, |p| p.sweep()),
        Command::Ekf(c) => (c, |p| p.ekf()),
        Command::Validate {
            common,
            linear_only,
        } => {
            let cfg = load_config(common)?;
            let mut pipeline = Pipeline::new(cfg, common.out.clone())?;
            let report = pipeline.validate(*linear_only)?;
            print!("{}", report.render());
            if report.passed() {
                return Ok(());
            }
            return Err(CliError::validation("one or more validation checks failed"));
        }
    };
    let cfg = load_config(common)?;
    let mut pipeline = Pipeline::new(cfg, common.out.clone())?;
    action(&mut pipeline)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
