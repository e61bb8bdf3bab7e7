//! `lensforge` — convergence-map reconstruction from mock cluster
//! lensing data.
//!
//! Subcommands chain through files: `mock` writes truth maps, `observe`
//! derives catalogs from them, `reconstruct` samples the posterior,
//! `baseline` and `eval` score the results, and `pipeline` runs the whole
//! chain under one seed. Every artifact is written atomically with a
//! `*.manifest.json` reproducibility record beside it.
//!
//! Exit codes: 0 success, 2 invalid flags or parameters, 3 missing or
//! undecodable input files, 4 sampler divergence.

mod commands;
mod config;
mod runio;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{GridArgs, MockKnobs, ObserveKnobs, PriorKind, SceneArgs};
use crate::runio::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "lensforge",
    version,
    about = "Cluster convergence maps from simulated lensing observations"
)]
struct Cli {
    /// Worker threads (overrides the LENSFORGE_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; command-line flags take precedence over its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a cluster: particle cloud, truth convergence, photometry.
    Mock(MockArgs),
    /// Derive strong- and weak-lensing catalogs from a convergence map.
    Observe(ObserveArgs),
    /// Sample the convergence posterior behind a set of observations.
    Reconstruct(ReconstructArgs),
    /// Render a light-traces-mass convergence estimate from a catalog.
    Baseline(BaselineArgs),
    /// Score convergence estimates against truth maps.
    Eval(EvalArgs),
    /// Run mock → observe → reconstruct → eval end to end with one seed.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct MockArgs {
    /// Output directory for the cloud, truth maps, and photometry.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of projection directions.
    #[arg(long)]
    pub views: Option<usize>,
    #[command(flatten)]
    pub knobs: MockKnobs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct ObserveArgs {
    /// Truth convergence map (F32R raster).
    #[arg(long, value_name = "FILE")]
    pub kappa: PathBuf,
    /// Clean photometry stack to stamp lensed arcs into.
    #[arg(long, value_name = "FILE")]
    pub photometry: Option<PathBuf>,
    /// Output directory for the catalogs.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub knobs: ObserveKnobs,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Strong-lens systems catalog (JSON).
    #[arg(long, value_name = "FILE")]
    pub strong: Option<PathBuf>,
    /// Weak-lensing shear catalog (JSON).
    #[arg(long, value_name = "FILE")]
    pub weak: Option<PathBuf>,
    /// Observed photometry stack (F32R raster).
    #[arg(long, value_name = "FILE")]
    pub photometry: Option<PathBuf>,
    /// Output directory for posterior samples and summary maps.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Initialization strategy; only "auto" (annealed prior start) exists.
    #[arg(long, default_value = "auto")]
    pub kappa_init: String,
    /// Score prior backing the sampler.
    #[arg(long, value_enum, default_value_t = PriorKind::Grf)]
    pub prior: PriorKind,
    /// Shell command launching an external score provider.
    #[arg(long, value_name = "CMD")]
    pub score_cmd: Option<String>,
    /// Power-law slope of the built-in GRF prior spectrum.
    #[arg(long)]
    pub prior_slope: Option<f64>,
    /// Amplitude of the built-in GRF prior spectrum.
    #[arg(long)]
    pub prior_amplitude: Option<f64>,
    /// Number of posterior samples to draw.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Weight of the source-plane geometric term.
    #[arg(long)]
    pub lambda_geo: Option<f64>,
    /// Weight of the pixel-level photometric term.
    #[arg(long)]
    pub lambda_img: Option<f64>,
    /// Weight of the weak-shear term.
    #[arg(long)]
    pub lambda_w: Option<f64>,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Light-traces-mass source catalog (JSON array).
    #[arg(long, value_name = "FILE")]
    pub sources: PathBuf,
    /// Output convergence raster.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated convergence map(s); repeat for several clusters.
    #[arg(long, value_name = "FILE", required = true)]
    pub estimate: Vec<PathBuf>,
    /// Truth convergence map(s), parallel to --estimate.
    #[arg(long, value_name = "FILE", required = true)]
    pub truth: Vec<PathBuf>,
    /// observations.json bundle(s) used to build held-out masks;
    /// give one, one per cluster, or none (mask everything in).
    #[arg(long, value_name = "FILE")]
    pub mask_from: Vec<PathBuf>,
    /// Output directory for report.json and report.csv.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Output directory for all stage artifacts.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of posterior samples to draw.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Score prior backing the sampler.
    #[arg(long, value_enum, default_value_t = PriorKind::Grf)]
    pub prior: PriorKind,
    /// Shell command launching an external score provider.
    #[arg(long, value_name = "CMD")]
    pub score_cmd: Option<String>,
    #[command(flatten)]
    pub mock: MockKnobs,
    #[command(flatten)]
    pub observe: ObserveKnobs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub scene: SceneArgs,
}

/// Thread-pool size: `--threads` wins over `LENSFORGE_THREADS`; neither
/// set leaves rayon's default.
fn init_threads(flag: Option<usize>) -> CliResult<()> {
    let from_env = match std::env::var("LENSFORGE_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            CliError::usage(format!("LENSFORGE_THREADS must be an integer, got {v:?}"))
        })?),
        Err(_) => None,
    };
    if let Some(n) = flag.or(from_env) {
        if n == 0 {
            return Err(CliError::usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads(cli.threads)?;
    let argv: Vec<String> = std::env::args().collect();
    let command = argv.join(" ");
    match cli.command {
        Command::Mock(args) => commands::mock::run(command, cli.config.as_deref(), &args),
        Command::Observe(args) => commands::observe::run(command, cli.config.as_deref(), &args),
        Command::Reconstruct(args) => {
            commands::reconstruct::run(command, cli.config.as_deref(), &args)
        }
        Command::Baseline(args) => commands::baseline::run(command, cli.config.as_deref(), &args),
        Command::Eval(args) => commands::eval::run(command, cli.config.as_deref(), &args),
        Command::Pipeline(args) => commands::pipeline::run(command, cli.config.as_deref(), &args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
