//! Command-line interface: config parsing, flag overrides, subcommand
//! dispatch and exit-code policy.

pub mod config;
pub mod csvio;
pub mod runner;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::MgleError;
use config::RunConfig;
use runner::EXIT_ERROR;

#[derive(Debug, Parser)]
#[command(
    name = "mgle",
    version,
    about = "Memory-kernel and fluctuating-force extraction with verification of the underlying operator identities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Run configuration (JSON, schema 1).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides the config's output_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Ensemble seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid step override.
    #[arg(long)]
    dt: Option<f64>,
    /// Horizon override.
    #[arg(long = "t-max")]
    t_max: Option<f64>,
    /// Sample-count override (trajectory backend).
    #[arg(long)]
    samples: Option<u64>,
    /// Worker threads (falls back to MGLE_THREADS, then all cores).
    #[arg(long)]
    threads: Option<u32>,
    /// Run only these checks (repeatable; overrides the config list).
    #[arg(long = "check", value_name = "NAME")]
    checks: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full pipeline: simulate, correlate, extract, verify, report.
    Run(CommonArgs),
    /// Sample and integrate the configured ensemble; write the trajectory dump.
    Simulate(CommonArgs),
    /// Estimate correlation data from an existing trajectory dump.
    Correlate {
        #[command(flatten)]
        common: CommonArgs,
        /// Trajectory dump path (defaults to OUT/trajectory.mgle).
        #[arg(long, value_name = "PATH")]
        trajectory: Option<PathBuf>,
    },
    /// Solve the memory-kernel equation from series files.
    Kernel {
        /// Forcing series g(t) (CSV: t, re, im).
        #[arg(long, value_name = "PATH")]
        g: PathBuf,
        /// Memory-feedback series h(t).
        #[arg(long, value_name = "PATH")]
        h: PathBuf,
        /// Expected grid step (checked against the files).
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, value_name = "DIR", default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate the fluctuating forces from an extracted kernel.
    Forces(CommonArgs),
    /// Run the configured verification checks and write reports.
    Verify(CommonArgs),
    /// Non-stationary pipeline: two-time kernel plus its checks.
    NsVerify(CommonArgs),
    /// Check the Dyson identity (and unitarity) for a matrix config.
    Dyson(CommonArgs),
}

fn build_thread_pool(threads: Option<u32>) {
    let requested = threads.or_else(|| {
        std::env::var("MGLE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = requested {
        // A failure here means a pool already exists; that is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global();
    }
}

fn load_config(args: &CommonArgs) -> Result<(RunConfig, PathBuf), MgleError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(dt) = args.dt {
        config.grid.dt = dt;
    }
    if let Some(t_max) = args.t_max {
        config.grid.t_max = t_max;
    }
    if let Some(seed) = args.seed {
        if let Some(e) = config.ensemble.as_mut() {
            e.seed = seed;
        }
    }
    if let Some(samples) = args.samples {
        if let Some(e) = config.ensemble.as_mut() {
            e.n = samples as usize;
        }
    }
    if !args.checks.is_empty() {
        config.checks = args.checks.clone();
    }
    config.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((config, out))
}

/// Parse arguments, dispatch, and return the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) | Command::Verify(args) => with_config(args, runner::cmd_verify),
        Command::Simulate(args) => with_config(args, runner::cmd_simulate),
        Command::Correlate { common, trajectory } => {
            build_thread_pool(common.threads);
            load_config(common).and_then(|(config, out)| {
                runner::cmd_correlate(&config, &out, trajectory.as_deref())
            })
        }
        Command::Kernel { g, h, dt, out } => runner::cmd_kernel(g, h, *dt, out),
        Command::Forces(args) => with_config(args, runner::cmd_forces),
        Command::NsVerify(args) => with_config(args, runner::cmd_ns_verify),
        Command::Dyson(args) => with_config(args, runner::cmd_dyson),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn with_config(
    args: &CommonArgs,
    f: impl FnOnce(&RunConfig, &std::path::Path) -> Result<i32, MgleError>,
) -> Result<i32, MgleError> {
    build_thread_pool(args.threads);
    let (config, out) = load_config(args)?;
    f(&config, &out)
}

// Re-exported so integration tests can assert on the exit-code policy.
pub use runner::{EXIT_CHECK_FAILED as CHECK_FAILED, EXIT_ERROR as ERROR, EXIT_OK as OK};
