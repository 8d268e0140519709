//! Error measurement against Gaussian targets and the theoretical bounds.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::PotentialSpec;
use crate::rng::{StreamKey, StreamRole};
use crate::tuning;

const SYMMETRY_TOL: f64 = 1e-10;
const PSD_TOL: f64 = 1e-10;

/// Mean and covariance of a (surrogate) Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianSummary {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if covariance.shape() != (p, p) {
            return Err(Error::Input(format!(
                "covariance is {}x{}, mean has length {p}",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > SYMMETRY_TOL * scale {
            return Err(Error::Input("covariance is not symmetric".into()));
        }
        let min_eig = covariance
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -PSD_TOL * scale {
            return Err(Error::Input(format!(
                "covariance is not PSD (smallest eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub(crate) fn new_unchecked(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self { mean, covariance }
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }

    /// A point mass.
    pub fn dirac(point: &[f64]) -> Self {
        let p = point.len();
        Self {
            mean: DVector::from_column_slice(point),
            covariance: DMatrix::zeros(p, p),
        }
    }
}

// Symmetric square root with eigenvalues clamped at zero.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt_psd(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// Closed-form 2-Wasserstein distance between two Gaussians:
/// `‖μa-μb‖² + tr(Σa + Σb - 2 (Σb^½ Σa Σb^½)^½)`.
pub fn w2_gaussian(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dimension() != b.dimension() {
        return Err(Error::Input(format!(
            "dimension mismatch: {} vs {}",
            a.dimension(),
            b.dimension()
        )));
    }
    // Validates symmetry and PSD of both inputs.
    GaussianSummary::new(a.mean.clone(), a.covariance.clone())?;
    GaussianSummary::new(b.mean.clone(), b.covariance.clone())?;
    Ok(w2_gaussian_unchecked(a, b))
}

pub(crate) fn w2_gaussian_unchecked(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_b = sqrt_psd(&b.covariance);
    let cross = trace_sqrt_psd(&(&root_b * &a.covariance * &root_b));
    let cov_term = a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    (mean_term + cov_term.max(0.0)).sqrt()
}

/// Sample mean and unbiased sample covariance; needs at least `p + 1` samples.
pub fn empirical_summary(samples: &[Vec<f64>]) -> Result<GaussianSummary> {
    let p = samples.first().map_or(0, Vec::len);
    if p == 0 {
        return Err(Error::Input("no samples".into()));
    }
    if samples.len() < p + 1 {
        return Err(Error::Input(format!(
            "{} samples is too few for a {p}-dimensional covariance (need {})",
            samples.len(),
            p + 1
        )));
    }
    if samples.iter().any(|s| s.len() != p) {
        return Err(Error::Input("samples have inconsistent lengths".into()));
    }
    let refs: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
    Ok(summary_of(&refs, p))
}

fn summary_of(samples: &[&[f64]], p: usize) -> GaussianSummary {
    let n = samples.len() as f64;
    let mut mean = vec![0.0; p];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; p * p];
    let mut centered = vec![0.0; p];
    for s in samples {
        for i in 0..p {
            centered[i] = s[i] - mean[i];
        }
        for i in 0..p {
            let ci = centered[i];
            for j in i..p {
                cov[i * p + j] += ci * centered[j];
            }
        }
    }
    let mut out = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in i..p {
            let v = cov[i * p + j] / (n - 1.0);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    GaussianSummary::new_unchecked(DVector::from_vec(mean), out)
}

/// W2 between the Gaussian fitted to `samples` and `target`, with a
/// bootstrap standard error over resampled chains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct W2Estimate {
    pub value: f64,
    pub std_error: f64,
}

pub fn w2_to_target(
    samples: &[Vec<f64>],
    target: &GaussianSummary,
    replicates: usize,
    seed: u64,
) -> Result<W2Estimate> {
    let fitted = empirical_summary(samples)?;
    if fitted.dimension() != target.dimension() {
        return Err(Error::Input("sample and target dimensions differ".into()));
    }
    let value = w2_gaussian_unchecked(&fitted, target);
    if replicates < 2 {
        return Ok(W2Estimate { value, std_error: 0.0 });
    }
    let p = target.dimension();
    let n = samples.len();
    let mut rng = StreamKey::new(seed, 0, 0, StreamRole::Bootstrap).rng();
    let mut resample: Vec<&[f64]> = Vec::with_capacity(n);
    let draws: Vec<f64> = (0..replicates)
        .map(|_| {
            resample.clear();
            resample.extend((0..n).map(|_| samples[rng.random_range(0..n)].as_slice()));
            w2_gaussian_unchecked(&summary_of(&resample, p), target)
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / replicates as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (replicates - 1) as f64;
    Ok(W2Estimate {
        value,
        std_error: var.sqrt(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TheoremTag {
    /// Vanilla scheme bound.
    T1,
    /// Kinetic scheme bound.
    T2,
}

/// A bound split into the part that decays with `n` and the part that does
/// not. `total` is their sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEvaluation {
    pub theorem: TheoremTag,
    pub initialization_term: f64,
    pub discretization_term: f64,
    pub total: f64,
    pub measured: Option<f64>,
    /// Whether the parameters satisfy the theorem's precondition; the bound
    /// is reported either way.
    pub precondition_holds: bool,
}

impl BoundEvaluation {
    fn new(theorem: TheoremTag, initialization_term: f64, discretization_term: f64, precondition_holds: bool) -> Self {
        Self {
            theorem,
            initialization_term,
            discretization_term,
            total: initialization_term + discretization_term,
            measured: None,
            precondition_holds,
        }
    }

    pub fn with_measured(mut self, w2: f64) -> Self {
        self.measured = Some(w2);
        self
    }
}

/// Vanilla bound with `h̄ = M h`:
/// `1.03 e^{-mnh/2} W2₀ + 2.1 (h̄^Q + h̄/√R + (h̄^{Q-1} + h̄/R) √(κh̄)) √(p/m)`.
pub fn theorem1_bound(
    step: f64,
    points: usize,
    inner_steps: usize,
    spec: &PotentialSpec,
    w2_initial: f64,
    n: u64,
) -> BoundEvaluation {
    let m = spec.strong_convexity;
    let kappa = spec.kappa();
    let hb = spec.smoothness * step;
    let r = points as f64;
    let q = inner_steps as i32;
    let init = 1.03 * (-m * n as f64 * step / 2.0).exp() * w2_initial;
    let disc = 2.1
        * (hb.powi(q) + hb / r.sqrt() + (hb.powi(q - 1) + hb / r) * (kappa * hb).sqrt())
        * (spec.dimension as f64 / m).sqrt();
    let ok = tuning::vanilla_precondition(hb, points, inner_steps, kappa).holds;
    BoundEvaluation::new(TheoremTag::T1, init, disc, ok)
}

/// Kinetic bound with `h̄ = γ h`. `excess_energy` is `E[f(θ₀) - f(θ*)]`.
#[allow(clippy::too_many_arguments)]
pub fn theorem2_bound(
    step: f64,
    points: usize,
    inner_steps: usize,
    friction: f64,
    spec: &PotentialSpec,
    w2_initial: f64,
    excess_energy: f64,
    n: u64,
) -> BoundEvaluation {
    let m = spec.strong_convexity;
    let kappa = spec.kappa();
    let p = spec.dimension as f64;
    let hb = friction * step;
    let r = points as f64;
    let q = inner_steps as i32;
    let decay = (-m * n as f64 * step).exp();
    let init = 3.04 * decay * w2_initial + 1.1 * (decay / m * excess_energy.max(0.0)).sqrt();
    let disc = 80.11 * (hb.powi(3) / (r * r) + hb.powi(2 * q - 1)).sqrt() * (p / m).sqrt()
        + 4.33 * (hb.powi(6) / r.powi(3) + hb.powi(4 * q - 2)).sqrt() * (kappa * p / m).sqrt();
    let ok = tuning::kinetic_precondition(hb, points, inner_steps, kappa, friction, spec.smoothness).holds;
    BoundEvaluation::new(TheoremTag::T2, init, disc, ok)
}
