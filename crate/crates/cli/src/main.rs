mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Parallel randomized-midpoint Langevin samplers.
#[derive(Debug, Parser)]
#[command(name = "parmid", version, about)]
struct Cli {
    /// Worker threads for chain-level parallelism and benchmark pools.
    #[arg(long, global = true, env = "PARMID_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Tuning plan whose step size, R, Q, n and friction replace the config's.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradients evaluated per round; defaults to one slot per point.
    #[arg(long)]
    pub parallel_width: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Output format on stdout when no output directory is set.
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run an ensemble and emit its report (CSV + JSON).
    Sample(RunArgs),
    /// Turn an accuracy target into sampler parameters.
    Tune {
        /// Tuning request (JSON); `-` reads stdin.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compare empirical and analytic noise covariances at fixed midpoints.
    NoiseCheck(commands::NoiseCheckArgs),
    /// Wall-clock per iteration across parallel widths 1, 2, 4, ..., R.
    Benchmark {
        #[command(flatten)]
        run: RunArgs,
        /// Outer iterations timed per width.
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Report whether the configured parameters meet the error-bound precondition.
    Check(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: worker count must be positive");
            return ExitCode::from(commands::EXIT_CONFIG);
        }
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    let result = match cli.command {
        Command::Sample(args) => commands::sample(&args),
        Command::Tune { config, out_dir } => commands::tune(&config, out_dir.as_deref()),
        Command::NoiseCheck(args) => commands::noise_check(&args),
        Command::Benchmark { run, iterations } => commands::benchmark(&run, iterations, cli.workers),
        Command::Check(args) => commands::check(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) if e.is_broken_pipe() => ExitCode::from(commands::EXIT_OK),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
