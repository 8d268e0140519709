//! Browser front end: three JSON-in/JSON-out operations on a 2-D Gaussian
//! target, exported through wasm-bindgen and drawn by `www/main.js`.

use nalgebra::DMatrix;
use parmid::experiment::{run_experiment, ExperimentConfig, OutputConfig, PotentialConfig};
use parmid::potentials::{Potential, QuadraticPotential};
use parmid::samplers::{run, SamplerConfig};
use parmid::tuning::{tune, TuneRequest};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const MAX_ITERATIONS: u64 = 20_000;
const MAX_CHAINS: u64 = 5_000;

/// Gaussian with precision eigenvalues `1` and `condition`, rotated by
/// `angle` radians and centred at `mean`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub condition: f64,
    #[serde(default)]
    pub angle: f64,
    #[serde(default)]
    pub mean: [f64; 2],
}

impl TargetSpec {
    fn precision(&self) -> Vec<Vec<f64>> {
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (1.0, self.condition);
        vec![
            vec![a * c * c + b * s * s, (a - b) * c * s],
            vec![(a - b) * c * s, a * s * s + b * c * c],
        ]
    }

    fn potential_config(&self) -> PotentialConfig {
        PotentialConfig::Quadratic {
            precision: Some(self.precision()),
            diagonal: None,
            mean: Some(self.mean.to_vec()),
        }
    }

    fn build(&self) -> Result<QuadraticPotential, String> {
        if !(self.condition >= 1.0 && self.condition.is_finite()) {
            return Err(format!("condition number must be at least 1, got {}", self.condition));
        }
        let precision = DMatrix::from_row_slice(2, 2, &self.precision().concat());
        QuadraticPotential::new(precision, Some(self.mean.to_vec())).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRequest {
    pub target: TargetSpec,
    pub sampler: SamplerConfig,
}

#[derive(Debug, Serialize)]
pub struct TrajectoryResponse {
    pub path: Vec<[f64; 2]>,
    pub mean: [f64; 2],
    pub covariance: [[f64; 2]; 2],
    pub gradient_evals: u64,
    pub sequential_rounds: u64,
    pub warnings: Vec<String>,
    pub diverged: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceRequest {
    pub target: TargetSpec,
    pub sampler: SamplerConfig,
    pub chains: u64,
    #[serde(default)]
    pub record_every: Option<u64>,
}

#[derive(Debug, Serialize)]
pub struct ConvergencePoint {
    pub iteration: u64,
    pub w2: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ConvergenceResponse {
    pub rows: Vec<ConvergencePoint>,
    pub precondition_holds: bool,
    pub sequential_rounds: u64,
    pub warnings: Vec<String>,
}

fn parse<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("invalid request: {e}"))
}

fn emit<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn check_size(sampler: &SamplerConfig) -> Result<(), String> {
    if sampler.iterations > MAX_ITERATIONS {
        return Err(format!("at most {MAX_ITERATIONS} iterations in the browser"));
    }
    Ok(())
}

/// One chain, every iterate recorded.
pub fn trajectory(json: &str) -> Result<String, String> {
    let req: TrajectoryRequest = parse(json)?;
    check_size(&req.sampler)?;
    let target = req.target.build()?;
    let trace = run(&req.sampler, &target, 1).map_err(|e| e.to_string())?;
    let gaussian = target.gaussian_target().ok_or("target has no Gaussian form")?;
    let cov = &gaussian.covariance;
    emit(&TrajectoryResponse {
        path: trace.snapshots.iter().map(|s| [s.theta[0], s.theta[1]]).collect(),
        mean: [gaussian.mean[0], gaussian.mean[1]],
        covariance: [[cov[(0, 0)], cov[(0, 1)]], [cov[(1, 0)], cov[(1, 1)]]],
        gradient_evals: trace.counters.gradient_evals,
        sequential_rounds: trace.counters.sequential_rounds,
        warnings: trace.warnings,
        diverged: trace.divergence.is_some(),
    })
}

/// Ensemble W2 to the target against the error bound, per recorded iteration.
pub fn convergence(json: &str) -> Result<String, String> {
    let req: ConvergenceRequest = parse(json)?;
    check_size(&req.sampler)?;
    if req.chains > MAX_CHAINS {
        return Err(format!("at most {MAX_CHAINS} chains in the browser"));
    }
    req.target.build()?;
    let config = ExperimentConfig {
        potential: req.target.potential_config(),
        sampler: req.sampler,
        seed: None,
        ensemble: req.chains,
        record_every: req.record_every,
        bootstrap: 0,
        w2_initial: None,
        gradient_delay_ms: None,
        output: OutputConfig::default(),
    };
    let report = run_experiment(&config).map_err(|e| e.to_string())?;
    emit(&ConvergenceResponse {
        rows: report
            .rows
            .iter()
            .map(|r| ConvergencePoint {
                iteration: r.iteration,
                w2: r.w2_target,
                bound: r.bound,
            })
            .collect(),
        precondition_holds: report.summary.preconditions.holds,
        sequential_rounds: report.summary.per_chain.sequential_rounds,
        warnings: report.summary.warnings,
    })
}

/// Tuning request in, plan out.
pub fn tune_plan(json: &str) -> Result<String, String> {
    let req: TuneRequest = parse(json)?;
    emit(&tune(&req).map_err(|e| e.to_string())?)
}

#[wasm_bindgen(js_name = sampleTrajectory)]
pub fn sample_trajectory_js(request: &str) -> Result<String, JsError> {
    trajectory(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = convergenceCurve)]
pub fn convergence_js(request: &str) -> Result<String, JsError> {
    convergence(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = tunePlan)]
pub fn tune_js(request: &str) -> Result<String, JsError> {
    tune_plan(request).map_err(|e| JsError::new(&e))
}
