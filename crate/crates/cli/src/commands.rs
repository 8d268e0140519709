use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use parmid::experiment::{run_experiment, ExperimentConfig};
use parmid::noise::{draw_vanilla_noise, kinetic_covariance, vanilla_covariance, KineticNoiseFactor, MidpointDraw};
use parmid::parallel::{Executor, ParallelWidth};
use parmid::rng::{StreamKey, StreamRole};
use parmid::samplers::time_iterations;
use parmid::tuning::{check_preconditions, tune as tune_plan, TunePlan, TuneRequest};
use parmid::Error;
use serde::Serialize;

use crate::{Format, RunArgs};

pub const EXIT_OK: u8 = 0;
pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_STATISTICAL: u8 = 4;

const Z_LIMIT: f64 = 5.0;
const MIN_SAMPLES: usize = 10_000;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }

    fn other(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_OTHER,
            error: error.into(),
        }
    }

    /// The reader went away (e.g. `| head`); not worth reporting.
    pub fn is_broken_pipe(&self) -> bool {
        self.error
            .downcast_ref::<io::Error>()
            .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Domain(_) | Error::Index(_) | Error::Input(_) | Error::Csv { .. } | Error::Json(_) => {
                EXIT_CONFIG
            }
            Error::Divergence { .. } => EXIT_DIVERGENCE,
            Error::Worker { .. } | Error::Internal(_) | Error::Io(_) => EXIT_OTHER,
        };
        Self { code, error: e.into() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::other(e)
    }
}

pub type Outcome = Result<u8, Failure>;

fn write_stdout(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()
}

fn read_input(path: &Path) -> Result<String, Failure> {
    if path == Path::new("-") {
        let mut text = String::new();
        io::stdin().read_to_string(&mut text)?;
        return Ok(text);
    }
    fs::read_to_string(path).map_err(|e| Failure::config(anyhow!("cannot read {}: {e}", path.display())))
}

fn load_config(args: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::from_json(&read_input(&args.config)?)?;
    if let Some(seed) = args.seed {
        config.seed = Some(seed);
    }
    if args.parallel_width.is_some() {
        config.sampler.parallel_width = ParallelWidth::from_option(args.parallel_width)?;
    }
    if let Some(path) = &args.plan {
        let plan: TunePlan = serde_json::from_str(&read_input(path)?)
            .map_err(|e| Failure::config(anyhow!("invalid plan {}: {e}", path.display())))?;
        apply_plan(&mut config, &plan)?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_plan(config: &mut ExperimentConfig, plan: &TunePlan) -> Result<(), Failure> {
    let sampler = &mut config.sampler;
    if sampler.kind.regime() != plan.regime {
        return Err(Failure::config(anyhow!(
            "plan is for the {:?} regime but the sampler is {}",
            plan.regime,
            sampler.kind
        )));
    }
    sampler.step_size = plan.step_size;
    sampler.points = plan.points;
    sampler.inner_steps = plan.inner_steps;
    sampler.iterations = plan.iterations;
    sampler.friction = plan.friction;
    if config.w2_initial.is_none() {
        config.w2_initial = plan.w2_initial;
    }
    Ok(())
}

fn out_dir(args: &RunArgs, config: &ExperimentConfig) -> Option<PathBuf> {
    args.out_dir.clone().or_else(|| config.output.dir.clone())
}

pub fn sample(args: &RunArgs) -> Outcome {
    let config = load_config(args)?;
    let report = run_experiment(&config)?;
    match out_dir(args, &config) {
        Some(dir) => {
            let stem = config.output.stem.as_deref().unwrap_or("trace");
            let (csv, json) = report.write_files(&dir, stem)?;
            eprintln!("wrote {} and {}", csv.display(), json.display());
        }
        None => {
            let mut buf = Vec::new();
            match args.format {
                Format::Csv => report.write_csv(&mut buf)?,
                Format::Json => {
                    report.write_json(&mut buf)?;
                    buf.push(b'\n');
                }
            }
            io::stdout().lock().write_all(&buf)?;
        }
    }
    for w in &report.summary.warnings {
        eprintln!("warning: {w}");
    }
    match &report.summary.divergence {
        Some(d) => {
            eprintln!("error: {}", d.message);
            Ok(EXIT_DIVERGENCE)
        }
        None => Ok(EXIT_OK),
    }
}

pub fn tune(request: &Path, out_dir: Option<&Path>) -> Outcome {
    let req: TuneRequest = serde_json::from_str(&read_input(request)?)
        .map_err(|e| Failure::config(anyhow!("invalid tuning request: {e}")))?;
    let plan = tune_plan(&req)?;
    let text = serde_json::to_string_pretty(&plan).map_err(Failure::other)?;
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("plan.json");
            fs::write(&path, format!("{text}\n"))?;
            eprintln!("wrote {}", path.display());
        }
        None => write_stdout(&format!("{text}\n"))?,
    }
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    Ok(EXIT_OK)
}

pub fn check(args: &RunArgs) -> Outcome {
    let config = load_config(args)?;
    let potential = config.build_potential()?;
    let report = check_preconditions(&config.sampler, potential.spec(), config.sampler.kind.regime())?;
    write_stdout(&format!("{}\n", serde_json::to_string_pretty(&report).map_err(Failure::other)?))?;
    Ok(if report.holds { EXIT_OK } else { EXIT_STATISTICAL })
}

#[derive(Debug, clap::Args)]
pub struct NoiseCheckArgs {
    /// Number of midpoints R.
    #[arg(long, default_value_t = 2)]
    pub points: usize,
    /// Step size h.
    #[arg(long)]
    pub step_size: f64,
    /// Friction γ; selects the kinetic noise.
    #[arg(long)]
    pub friction: Option<f64>,
    /// Number of joint draws N (at least 10⁴).
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Fixed midpoints U_1..U_R; defaults to the stratum centres.
    #[arg(long, value_delimiter = ',')]
    pub midpoints: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the full comparison table to this CSV file.
    #[arg(long)]
    pub covariance_out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CovarianceRow {
    i: usize,
    j: usize,
    analytic: f64,
    empirical: f64,
    std_error: f64,
    z: f64,
}

fn covariance_rows(draws: &[Vec<f64>], expected: &[Vec<f64>]) -> Vec<CovarianceRow> {
    let n = draws.len() as f64;
    let k = expected.len();
    let mut rows = Vec::new();
    for i in 0..k {
        for j in i..k {
            let (mut sum, mut sq) = (0.0, 0.0);
            for d in draws {
                let x = d[i] * d[j];
                sum += x;
                sq += x * x;
            }
            let empirical = sum / n;
            let var = (sq / n - empirical * empirical) * n / (n - 1.0);
            let std_error = (var / n).sqrt();
            rows.push(CovarianceRow {
                i,
                j,
                analytic: expected[i][j],
                empirical,
                std_error,
                z: (empirical - expected[i][j]) / std_error,
            });
        }
    }
    rows
}

pub fn noise_check(args: &NoiseCheckArgs) -> Outcome {
    if args.samples < MIN_SAMPLES {
        return Err(Failure::config(anyhow!(
            "noise check needs at least {MIN_SAMPLES} samples, got {}",
            args.samples
        )));
    }
    if args.points == 0 {
        return Err(Failure::config(anyhow!("number of midpoints must be positive")));
    }
    let values = args.midpoints.clone().unwrap_or_else(|| {
        let r = args.points as f64;
        (0..args.points).map(|i| (i as f64 + 0.5) / r).collect()
    });
    if values.len() != args.points {
        return Err(Failure::config(anyhow!(
            "{} midpoints given for R = {}",
            values.len(),
            args.points
        )));
    }
    let u = MidpointDraw::from_values(values)?;
    let h = args.step_size;
    let mut rng = StreamKey::new(args.seed, 0, 0, StreamRole::Brownian).rng();
    let (expected, draws) = match args.friction {
        None => {
            let expected = vanilla_covariance(h, &u);
            let mut draws = Vec::with_capacity(args.samples);
            for _ in 0..args.samples {
                let d = draw_vanilla_noise(h, 1, &u, &mut rng)?;
                let mut v: Vec<f64> = d.xi_mid.iter().map(|x| x[0]).collect();
                v.push(d.xi_full[0]);
                draws.push(v);
            }
            (expected, draws)
        }
        Some(gamma) => {
            let expected = kinetic_covariance(gamma, h, &u)?;
            let factor = KineticNoiseFactor::new(gamma, h, &u)?;
            let draws = (0..args.samples)
                .map(|_| {
                    let d = factor.draw(1, &mut rng);
                    let mut v: Vec<f64> = d.xi_mid.iter().map(|x| x[0]).collect();
                    v.push(d.xi_full[0]);
                    v.push(d.xi_bar[0]);
                    v
                })
                .collect::<Vec<_>>();
            (expected, draws)
        }
    };
    let expected: Vec<Vec<f64>> = expected.row_iter().map(|r| r.iter().copied().collect()).collect();
    let rows = covariance_rows(&draws, &expected);

    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for row in &rows {
        w.serialize(row).map_err(Failure::other)?;
    }
    w.flush()?;
    if let Some(path) = &args.covariance_out {
        let mut f = csv::Writer::from_path(path).map_err(Failure::other)?;
        for row in &rows {
            f.serialize(row).map_err(Failure::other)?;
        }
        f.flush()?;
    }

    let worst = rows.iter().map(|r| r.z.abs()).fold(0.0, f64::max);
    eprintln!("max |z| = {worst:.2} over {} entries ({} draws)", rows.len(), args.samples);
    if worst.is_finite() && worst <= Z_LIMIT {
        Ok(EXIT_OK)
    } else {
        eprintln!("error: covariance check failed (|z| > {Z_LIMIT})");
        Ok(EXIT_STATISTICAL)
    }
}

#[derive(Debug, Serialize)]
struct BenchmarkRow {
    width: usize,
    threads: usize,
    rounds_per_iteration: u64,
    mean_iteration_seconds: f64,
    mean_round_seconds: f64,
    speedup: f64,
}

fn widths(points: usize) -> Vec<usize> {
    let mut out: Vec<usize> = std::iter::successors(Some(1usize), |w| Some(w * 2))
        .take_while(|&w| w < points)
        .collect();
    out.push(points.max(1));
    out
}

pub fn benchmark(args: &RunArgs, iterations: Option<u64>, workers: Option<usize>) -> Outcome {
    let config = load_config(args)?.resolved();
    if config.gradient_delay_ms.unwrap_or(0.0) <= 0.0 {
        eprintln!("warning: no gradient_delay_ms configured; timings reflect raw gradient cost");
    }
    let iterations = iterations.unwrap_or(10);
    if iterations == 0 {
        return Err(Failure::config(anyhow!("benchmark needs at least one iteration")));
    }
    let potential = config.build_potential()?;
    let (points, _) = config.sampler.shape();
    let mut rows: Vec<BenchmarkRow> = Vec::new();
    for width in widths(points) {
        let sampler = config.sampler.clone().with_parallel_width(ParallelWidth::Limited(width));
        let threads = workers.map_or(width, |n| n.min(width));
        let executor = Executor::pool(threads)?;
        let (per_iteration, counters) = time_iterations(&sampler, potential.as_ref(), &executor, iterations)?;
        let secs = per_iteration.as_secs_f64();
        let rounds = counters.sequential_rounds / iterations;
        let base = rows.first().map_or(secs, |r| r.mean_iteration_seconds);
        rows.push(BenchmarkRow {
            width,
            threads,
            rounds_per_iteration: rounds,
            mean_iteration_seconds: secs,
            mean_round_seconds: secs / rounds.max(1) as f64,
            speedup: base / secs,
        });
    }

    let text = match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &rows {
                w.serialize(row).map_err(Failure::other)?;
            }
            String::from_utf8(w.into_inner().map_err(|e| Failure::other(anyhow!("{e}")))?).map_err(Failure::other)?
        }
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&rows).map_err(Failure::other)?),
    };
    match out_dir(args, &config) {
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            let ext = if args.format == Format::Json { "json" } else { "csv" };
            let path = dir.join(format!("benchmark.{ext}"));
            fs::write(&path, text)?;
            eprintln!("wrote {}", path.display());
        }
        None => write_stdout(&text)?,
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_ladder() {
        assert_eq!(widths(1), vec![1]);
        assert_eq!(widths(4), vec![1, 2, 4]);
        assert_eq!(widths(6), vec![1, 2, 4, 6]);
        assert_eq!(widths(8), vec![1, 2, 4, 8]);
    }

    #[test]
    fn covariance_rows_on_exact_draws() {
        let draws = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
        let rows = covariance_rows(&draws, &[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.empirical == 1.0));
    }
}
