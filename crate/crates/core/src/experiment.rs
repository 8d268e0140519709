//! JSON experiment configs and the reports they produce.
//!
//! A config names a potential, a sampler configuration and an ensemble size.
//! Running it yields one [`ReportRow`] per recorded iteration. The CSV form
//! of a report holds only quantities that are a deterministic function of
//! the config, so equal configs give byte-identical CSV files; wall-clock
//! times go into the JSON form only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    empirical_summary, theorem1_bound, theorem2_bound, w2_gaussian_unchecked, w2_to_target, BoundEvaluation,
    GaussianSummary,
};
use crate::potentials::{DelayedPotential, LogisticRidgePotential, Potential, QuadraticPotential};
use crate::samplers::{run_ensemble, ChainState, EnsembleSummary, InitialPoint, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    /// `f(θ) = ½ (θ-μ)ᵀ A (θ-μ)`; give exactly one of `precision` (rows of
    /// `A`) or `diagonal`.
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        precision: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        diagonal: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f64>>,
    },
    /// Ridge-penalized logistic regression on a `y,x1,...,xp` CSV file.
    Logistic { csv: PathBuf, ridge: f64 },
}

impl PotentialConfig {
    pub fn build(&self) -> Result<Box<dyn Potential>> {
        match self {
            Self::Quadratic {
                precision,
                diagonal,
                mean,
            } => match (precision, diagonal) {
                (Some(rows), None) => {
                    let p = rows.len();
                    if p == 0 || rows.iter().any(|r| r.len() != p) {
                        return Err(Error::config("precision must be a non-empty square matrix"));
                    }
                    let a = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
                    Ok(Box::new(QuadraticPotential::new(a, mean.clone())?))
                }
                (None, Some(d)) => Ok(Box::new(QuadraticPotential::diagonal(d, mean.clone())?)),
                _ => Err(Error::config(
                    "quadratic potential needs exactly one of `precision` or `diagonal`",
                )),
            },
            Self::Logistic { csv, ridge } => Ok(Box::new(LogisticRidgePotential::from_csv(csv, *ridge)?)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// File stem; `<stem>.csv` and `<stem>.json` are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub potential: PotentialConfig,
    pub sampler: SamplerConfig,
    /// Overrides `sampler.seed` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Number of independent chains.
    #[serde(default = "one")]
    pub ensemble: u64,
    /// Defaults to `max(1, n / 100)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<u64>,
    /// Bootstrap replicates for W2 standard errors; 0 disables them.
    #[serde(default)]
    pub bootstrap: usize,
    /// User-supplied `W2(ν₀, π)`; used for the bound when it cannot be
    /// computed from the target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_initial: Option<f64>,
    /// Sleep added to every gradient evaluation, in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient_delay_ms: Option<f64>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.ensemble == 0 {
            return Err(Error::config("ensemble must be positive"));
        }
        if self.record_every == Some(0) {
            return Err(Error::config("record_every must be positive"));
        }
        if let Some(d) = self.gradient_delay_ms {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::config(format!("gradient_delay_ms must be nonnegative, got {d}")));
            }
        }
        if let Some(w) = self.w2_initial {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("w2_initial must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn record_every(&self) -> u64 {
        self.record_every.unwrap_or((self.sampler.iterations / 100).max(1))
    }

    /// Fills every defaulted field so the result reproduces the run on its
    /// own.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if let Some(seed) = self.seed {
            out.sampler.seed = seed;
        }
        out.seed = Some(out.sampler.seed);
        out.record_every = Some(self.record_every());
        out
    }

    pub fn build_potential(&self) -> Result<Box<dyn Potential>> {
        let base = self.potential.build()?;
        match self.gradient_delay_ms {
            Some(ms) if ms > 0.0 => Ok(Box::new(DelayedPotential::new(base, Duration::from_secs_f64(ms / 1e3)))),
            _ => Ok(base),
        }
    }
}

/// One recorded iteration of an ensemble run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iteration: u64,
    /// Seconds since the run started.
    pub elapsed: f64,
    /// W2 between the Gaussian fitted to the ensemble and a Gaussian target.
    pub w2_target: Option<f64>,
    pub w2_std_error: Option<f64>,
    /// Non-Gaussian targets: W2 between the Gaussians fitted at this and the
    /// previous recorded iteration (mean distance for small ensembles).
    pub moment_drift: Option<f64>,
    pub bound: Option<f64>,
    /// Per chain.
    pub gradient_evals: u64,
    /// Per chain.
    pub sequential_rounds: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub summary: EnsembleSummary,
    /// Bound parameters at the final recorded iteration, when available.
    pub final_bound: Option<BoundEvaluation>,
}

const CSV_HEADER: [&str; 7] = [
    "iteration",
    "w2_target",
    "w2_std_error",
    "moment_drift",
    "bound",
    "gradient_evals",
    "sequential_rounds",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.17e}")).unwrap_or_default()
}

impl ExperimentReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(err)?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                opt(r.w2_target),
                opt(r.w2_std_error),
                opt(r.moment_drift),
                opt(r.bound),
                r.gradient_evals.to_string(),
                r.sequential_rounds.to_string(),
            ])
            .map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Writes `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
    pub fn write_files(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let json_path = dir.join(format!("{stem}.json"));
        self.write_csv(fs::File::create(&csv_path)?)?;
        let mut json = fs::File::create(&json_path)?;
        self.write_json(&mut json)?;
        json.write_all(b"\n")?;
        Ok((csv_path, json_path))
    }
}

/// `W2(ν₀, π)` and `E[f(θ₀) - f(θ*)]` when they follow from the config.
fn initial_terms(config: &ExperimentConfig, potential: &dyn Potential) -> (Option<f64>, Option<f64>) {
    let sampler = &config.sampler;
    let p = potential.dimension();
    let fixed = match &sampler.initial_point {
        InitialPoint::Auto => Some(potential.spec().minimizer.clone().unwrap_or_else(|| vec![0.0; p])),
        InitialPoint::Zero => Some(vec![0.0; p]),
        InitialPoint::Fixed(x) => Some(x.clone()),
        InitialPoint::Target => None,
    };
    let f_star = potential.spec().minimizer.as_ref().map(|m| potential.value(m));
    match (fixed, potential.gaussian_target()) {
        (None, Some(_)) => (Some(0.0), Some(p as f64 / 2.0)),
        (Some(x), Some(target)) => (
            Some(w2_gaussian_unchecked(&GaussianSummary::dirac(&x), &target)),
            f_star.map(|fs| potential.value(&x) - fs),
        ),
        (Some(x), None) => (config.w2_initial, f_star.map(|fs| potential.value(&x) - fs)),
        (None, None) => (config.w2_initial, None),
    }
}

fn bound_at(
    config: &SamplerConfig,
    potential: &dyn Potential,
    w2_initial: Option<f64>,
    excess: Option<f64>,
    k: u64,
) -> Option<BoundEvaluation> {
    let (r, q) = config.shape();
    let spec = potential.spec();
    let w2 = w2_initial?;
    match config.friction.filter(|_| config.kind.is_kinetic()) {
        None => Some(theorem1_bound(config.step_size, r, q, spec, w2, k)),
        Some(gamma) => Some(theorem2_bound(config.step_size, r, q, gamma, spec, w2, excess?, k)),
    }
}

fn thetas(states: &[ChainState]) -> Vec<Vec<f64>> {
    states.iter().map(|s| s.theta.clone()).collect()
}

/// Runs the ensemble described by `config` and collects the report rows.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let config = config.resolved();
    let potential = config.build_potential()?;
    let potential: &dyn Potential = potential.as_ref();
    let sampler = &config.sampler;
    let target = potential.gaussian_target();
    let (w2_initial, excess) = initial_terms(&config, potential);
    let p = potential.dimension();

    let mut rows = Vec::new();
    let mut previous: Option<Vec<Vec<f64>>> = None;
    let mut last_bound = None;
    let summary = run_ensemble(sampler, potential, config.ensemble, config.record_every(), |progress| {
        let samples = thetas(progress.states);
        let enough = samples.len() > p;
        let (w2_target, w2_std_error) = match (&target, enough) {
            (Some(t), true) => {
                let est = w2_to_target(&samples, t, config.bootstrap, sampler.seed)?;
                (Some(est.value), (config.bootstrap >= 2).then_some(est.std_error))
            }
            (Some(t), false) => {
                let mean = empirical_mean(&samples, p);
                let dist = w2_gaussian_unchecked(&GaussianSummary::dirac(&mean), &GaussianSummary::dirac(t.mean.as_slice()));
                (Some(dist), None)
            }
            (None, _) => (None, None),
        };
        let moment_drift = match (&target, &previous) {
            (None, Some(prev)) if enough => Some(w2_gaussian_unchecked(
                &empirical_summary(prev)?,
                &empirical_summary(&samples)?,
            )),
            (None, Some(prev)) => {
                let (a, b) = (empirical_mean(prev, p), empirical_mean(&samples, p));
                Some(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            }
            _ => None,
        };
        if target.is_none() {
            previous = Some(samples);
        }
        let bound = bound_at(sampler, potential, w2_initial, excess, progress.iteration);
        rows.push(ReportRow {
            iteration: progress.iteration,
            elapsed: progress.elapsed.as_secs_f64(),
            w2_target,
            w2_std_error,
            moment_drift,
            bound: bound.as_ref().map(|b| b.total),
            gradient_evals: progress.per_chain.gradient_evals,
            sequential_rounds: progress.per_chain.sequential_rounds,
        });
        last_bound = bound.map(|b| match w2_target {
            Some(w) => b.with_measured(w),
            None => b,
        });
        Ok(())
    })?;
    Ok(ExperimentReport {
        config,
        rows,
        summary,
        final_bound: last_bound,
    })
}

fn empirical_mean(samples: &[Vec<f64>], p: usize) -> Vec<f64> {
    let mut mean = vec![0.0; p];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x;
        }
    }
    let n = samples.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "potential": {"kind": "quadratic", "diagonal": [1.0, 4.0]},
        "sampler": {"kind": "prlmc", "step_size": 0.02, "points": 2, "inner_steps": 2, "iterations": 10},
        "ensemble": 8,
        "record_every": 3,
        "seed": 5
    }"#;

    #[test]
    fn minimal_config_rows() {
        let config = ExperimentConfig::from_json(MINIMAL).unwrap();
        let report = run_experiment(&config).unwrap();
        assert_eq!(report.rows.len(), 1 + 10usize.div_ceil(3));
        assert_eq!(report.rows.last().unwrap().iteration, 10);
        assert_eq!(report.rows.last().unwrap().gradient_evals, 40);
        assert!(report.rows.iter().all(|r| r.w2_target.is_some() && r.bound.is_some()));
        assert_eq!(report.config.sampler.seed, 5);
        assert_eq!(report.config.record_every, Some(3));
    }

    #[test]
    fn csv_is_reproducible() {
        let config = ExperimentConfig::from_json(MINIMAL).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_experiment(&config).unwrap().write_csv(&mut a).unwrap();
        let rerun = run_experiment(&config).unwrap();
        rerun.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        // The embedded config alone reproduces the run.
        let mut c = Vec::new();
        run_experiment(&rerun.config).unwrap().write_csv(&mut c).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn rejects_unknown_and_invalid_fields() {
        let unknown = MINIMAL.replace("\"ensemble\"", "\"ensembel\"");
        assert!(matches!(ExperimentConfig::from_json(&unknown), Err(Error::Config(_))));
        let zero_r = MINIMAL.replace("\"points\": 2", "\"points\": 0");
        assert!(matches!(ExperimentConfig::from_json(&zero_r), Err(Error::Config(_))));
        let both = MINIMAL.replace("\"diagonal\"", "\"precision\": [[1.0]], \"diagonal\"");
        let config = ExperimentConfig::from_json(&both).unwrap();
        assert!(config.build_potential().is_err());
    }

    #[test]
    fn default_record_every() {
        let mut config = ExperimentConfig::from_json(MINIMAL).unwrap();
        config.record_every = None;
        config.sampler.iterations = 950;
        assert_eq!(config.record_every(), 9);
        config.sampler.iterations = 50;
        assert_eq!(config.record_every(), 1);
    }

    #[test]
    fn logistic_reports_drift() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("data.csv");
        fs::write(&csv, "y,x1,x2\n1,0.5,1.0\n-1,-0.3,0.2\n1,1.5,-0.7\n-1,-1.0,-1.2\n").unwrap();
        let text = format!(
            r#"{{"potential": {{"kind": "logistic", "csv": {:?}, "ridge": 1.0}},
                "sampler": {{"kind": "lmc", "step_size": 0.05, "iterations": 6}},
                "ensemble": 4, "record_every": 2}}"#,
            csv.to_str().unwrap()
        );
        let report = run_experiment(&ExperimentConfig::from_json(&text).unwrap()).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert!(report.rows[0].moment_drift.is_none());
        assert!(report.rows[1..].iter().all(|r| r.moment_drift.is_some() && r.w2_target.is_none()));
        assert!(report.rows.iter().all(|r| r.bound.is_none()));
        let (c, j) = report.write_files(dir.path(), "trace").unwrap();
        assert!(c.exists() && j.exists());
    }
}
