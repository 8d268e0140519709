//! Gradient oracles for strongly log-concave targets `π ∝ exp(-f)`.
//!
//! A [`Potential`] is pure: its gradient depends on the input point only, so
//! evaluation order never changes results. All counting happens in an
//! [`EvalCounter`] attached through a [`GradientOracle`].

use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::GaussianSummary;

/// Curvature constants of a potential: `m I ≼ ∇²f ≼ M I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub dimension: usize,
    pub strong_convexity: f64,
    pub smoothness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimizer: Option<Vec<f64>>,
}

impl PotentialSpec {
    pub fn new(
        dimension: usize,
        strong_convexity: f64,
        smoothness: f64,
        minimizer: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::config("dimension must be positive"));
        }
        if !(strong_convexity > 0.0 && strong_convexity.is_finite()) {
            return Err(Error::config(format!(
                "strong convexity must be positive and finite, got {strong_convexity}"
            )));
        }
        if !(smoothness >= strong_convexity && smoothness.is_finite()) {
            return Err(Error::config(format!(
                "smoothness {smoothness} must be finite and >= strong convexity {strong_convexity}"
            )));
        }
        if let Some(x) = &minimizer {
            if x.len() != dimension {
                return Err(Error::config(format!(
                    "minimizer has length {}, expected {dimension}",
                    x.len()
                )));
            }
        }
        Ok(Self {
            dimension,
            strong_convexity,
            smoothness,
            minimizer,
        })
    }

    /// Condition number `M / m`.
    pub fn kappa(&self) -> f64 {
        self.smoothness / self.strong_convexity
    }
}

pub trait Potential: Send + Sync {
    fn spec(&self) -> &PotentialSpec;

    fn value(&self, theta: &[f64]) -> f64;

    /// Writes `∇f(theta)` into `out`. Callers guarantee matching lengths.
    fn grad_into(&self, theta: &[f64], out: &mut [f64]);

    /// The target itself when it is Gaussian, used for exact W2 checks.
    fn gaussian_target(&self) -> Option<GaussianSummary> {
        None
    }

    fn dimension(&self) -> usize {
        self.spec().dimension
    }
}

impl<P: Potential + ?Sized> Potential for Box<P> {
    fn spec(&self) -> &PotentialSpec {
        (**self).spec()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        (**self).value(theta)
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        (**self).grad_into(theta, out)
    }

    fn gaussian_target(&self) -> Option<GaussianSummary> {
        (**self).gaussian_target()
    }
}

/// Running totals of gradient work.
///
/// Counts are atomic so concurrent workers never lose increments. Per-round
/// wall-clock durations are only kept when enabled, since ensembles run
/// millions of rounds.
#[derive(Debug, Default)]
pub struct EvalCounter {
    evals: AtomicU64,
    rounds: AtomicU64,
    record_round_times: bool,
    round_times: Mutex<Vec<Duration>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub gradient_evals: u64,
    pub sequential_rounds: u64,
}

impl std::ops::Add for CounterSnapshot {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            gradient_evals: self.gradient_evals + rhs.gradient_evals,
            sequential_rounds: self.sequential_rounds + rhs.sequential_rounds,
        }
    }
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_round_times() -> Self {
        Self {
            record_round_times: true,
            ..Self::default()
        }
    }

    pub fn add_evals(&self, n: u64) {
        self.evals.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_rounds(&self, n: u64) {
        self.rounds.fetch_add(n, Ordering::Relaxed);
    }

    pub fn record_round_time(&self, elapsed: Duration) {
        if self.record_round_times {
            self.round_times
                .lock()
                .expect("round timing lock poisoned")
                .push(elapsed);
        }
    }

    pub fn total_gradient_evals(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn sequential_rounds(&self) -> u64 {
        self.rounds.load(Ordering::Relaxed)
    }

    pub fn wall_clock_per_round(&self) -> Vec<Duration> {
        self.round_times
            .lock()
            .expect("round timing lock poisoned")
            .clone()
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            gradient_evals: self.total_gradient_evals(),
            sequential_rounds: self.sequential_rounds(),
        }
    }

    /// Only valid at run start.
    pub fn reset(&self) {
        self.evals.store(0, Ordering::Relaxed);
        self.rounds.store(0, Ordering::Relaxed);
        self.round_times
            .lock()
            .expect("round timing lock poisoned")
            .clear();
    }
}

/// A potential paired with the counter its evaluations are charged to.
#[derive(Clone, Copy)]
pub struct GradientOracle<'a> {
    pub potential: &'a dyn Potential,
    pub counter: &'a EvalCounter,
}

impl<'a> GradientOracle<'a> {
    pub fn new(potential: &'a dyn Potential, counter: &'a EvalCounter) -> Self {
        Self { potential, counter }
    }

    pub fn dimension(&self) -> usize {
        self.potential.dimension()
    }

    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dimension()];
        self.gradient_into(theta, &mut out)?;
        Ok(out)
    }

    pub fn gradient_into(&self, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let p = self.dimension();
        if theta.len() != p || out.len() != p {
            return Err(Error::config(format!(
                "gradient called with length {} (output {}), potential has dimension {p}",
                theta.len(),
                out.len()
            )));
        }
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite coordinate {i} ({}) passed to gradient",
                theta[i]
            )));
        }
        self.potential.grad_into(theta, out);
        self.counter.add_evals(1);
        Ok(())
    }

    /// Gradients of every point, in input order, charged as
    /// `⌈len / parallel_width⌉` sequential rounds.
    pub fn gradient_batch(
        &self,
        points: &[Vec<f64>],
        parallel_width: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if parallel_width == 0 {
            return Err(Error::config("parallel width must be positive"));
        }
        let grads = points
            .iter()
            .map(|x| self.gradient(x))
            .collect::<Result<Vec<_>>>()?;
        self.counter
            .add_rounds(points.len().div_ceil(parallel_width) as u64);
        Ok(grads)
    }
}

/// Largest component-wise deviation between `∇f(theta)` and its central
/// finite-difference approximation. Each deviation is scaled by
/// `max(|∂_i f|, 1)`, so it is relative for large components and absolute
/// near zero. Does not touch any counter.
pub fn check_gradient_fd(potential: &dyn Potential, theta: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::domain(format!(
            "finite-difference step must lie in (0, 1e-3], got {step}"
        )));
    }
    let p = potential.dimension();
    if theta.len() != p {
        return Err(Error::config(format!(
            "point has length {}, potential has dimension {p}",
            theta.len()
        )));
    }
    let mut grad = vec![0.0; p];
    potential.grad_into(theta, &mut grad);
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p {
        probe[i] = theta[i] + step;
        let up = potential.value(&probe);
        probe[i] = theta[i] - step;
        let down = potential.value(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * step);
        worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
    }
    Ok(worst)
}

/// `f(θ) = ½ (θ-μ)ᵀ A (θ-μ)` with `A` symmetric positive definite.
#[derive(Clone, Debug)]
pub struct QuadraticPotential {
    precision: DMatrix<f64>,
    mean: Vec<f64>,
    // Row-major copy of A, or None when A is diagonal.
    dense: Option<Vec<f64>>,
    diag: Vec<f64>,
    eigenvalues: Vec<f64>,
    spec: PotentialSpec,
}

impl QuadraticPotential {
    pub fn new(precision: DMatrix<f64>, mean: Option<Vec<f64>>) -> Result<Self> {
        let p = precision.nrows();
        if p == 0 || precision.ncols() != p {
            return Err(Error::config(format!(
                "precision matrix must be square and non-empty, got {}x{}",
                precision.nrows(),
                precision.ncols()
            )));
        }
        if precision.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("precision matrix has non-finite entries"));
        }
        let scale = precision.amax().max(1.0);
        for i in 0..p {
            for j in 0..i {
                if (precision[(i, j)] - precision[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::config(format!(
                        "precision matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let mean = mean.unwrap_or_else(|| vec![0.0; p]);
        if mean.len() != p {
            return Err(Error::config(format!(
                "mean has length {}, precision is {p}x{p}",
                mean.len()
            )));
        }
        let mut eigenvalues: Vec<f64> = precision
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eigenvalues.sort_by(f64::total_cmp);
        let (m, big_m) = (eigenvalues[0], eigenvalues[p - 1]);
        if m <= 0.0 {
            return Err(Error::config(format!(
                "precision matrix is not positive definite (smallest eigenvalue {m})"
            )));
        }
        let is_diagonal = (0..p).all(|i| (0..p).all(|j| i == j || precision[(i, j)] == 0.0));
        let dense = (!is_diagonal).then(|| {
            let mut rows = Vec::with_capacity(p * p);
            for i in 0..p {
                rows.extend(precision.row(i).iter());
            }
            rows
        });
        let diag = precision.diagonal().iter().copied().collect();
        let spec = PotentialSpec::new(p, m, big_m, Some(mean.clone()))?;
        Ok(Self {
            precision,
            mean,
            dense,
            diag,
            eigenvalues,
            spec,
        })
    }

    pub fn diagonal(diag: &[f64], mean: Option<Vec<f64>>) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)), mean)
    }

    /// `A = I`, zero mean.
    pub fn standard(dimension: usize) -> Result<Self> {
        Self::diagonal(&vec![1.0; dimension], None)
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Eigenvalues of `A` in ascending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let eig = self.precision.clone().symmetric_eigen();
        let inv = eig.eigenvalues.map(|l| 1.0 / l);
        &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
    }
}

impl Potential for QuadraticPotential {
    fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut g = vec![0.0; theta.len()];
        self.grad_into(theta, &mut g);
        0.5 * theta
            .iter()
            .zip(&self.mean)
            .zip(&g)
            .map(|((t, mu), gi)| (t - mu) * gi)
            .sum::<f64>()
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        let p = self.mean.len();
        match &self.dense {
            None => {
                for i in 0..p {
                    out[i] = self.diag[i] * (theta[i] - self.mean[i]);
                }
            }
            Some(rows) => {
                for (i, row) in rows.chunks_exact(p).enumerate() {
                    let mut acc = 0.0;
                    for j in 0..p {
                        acc += row[j] * (theta[j] - self.mean[j]);
                    }
                    out[i] = acc;
                }
            }
        }
    }

    fn gaussian_target(&self) -> Option<GaussianSummary> {
        Some(GaussianSummary::new_unchecked(
            DVector::from_column_slice(&self.mean),
            self.covariance(),
        ))
    }
}

/// `f(θ) = Σ log(1 + exp(-yᵢ xᵢᵀθ)) + (λ/2)‖θ‖²`.
///
/// `m = λ` and `M = λ + σ_max(X)² / 4` with the exact largest singular value.
/// The minimizer is located by Newton's method at construction.
#[derive(Clone, Debug)]
pub struct LogisticRidgePotential {
    design: DMatrix<f64>,
    labels: Vec<f64>,
    ridge: f64,
    spec: PotentialSpec,
}

impl LogisticRidgePotential {
    pub fn new(design: DMatrix<f64>, labels: Vec<f64>, ridge: f64) -> Result<Self> {
        let (n, p) = design.shape();
        if p == 0 {
            return Err(Error::config("design matrix has no columns"));
        }
        if labels.len() != n {
            return Err(Error::config(format!(
                "{} labels for {n} design rows",
                labels.len()
            )));
        }
        if let Some(i) = labels.iter().position(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::config(format!(
                "label {i} is {}, expected -1 or +1",
                labels[i]
            )));
        }
        if design.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("design matrix has non-finite entries"));
        }
        if !(ridge > 0.0 && ridge.is_finite()) {
            return Err(Error::config(format!("ridge weight must be positive, got {ridge}")));
        }
        let sigma_max = if n == 0 {
            0.0
        } else {
            design
                .clone()
                .singular_values()
                .iter()
                .copied()
                .fold(0.0, f64::max)
        };
        let smoothness = ridge + sigma_max * sigma_max / 4.0;
        let spec = PotentialSpec::new(p, ridge, smoothness, None)?;
        let mut potential = Self {
            design,
            labels,
            ridge,
            spec,
        };
        let minimizer = potential.newton_minimizer()?;
        potential.spec.minimizer = Some(minimizer);
        Ok(potential)
    }

    /// Reads `y,x1,...,xp` rows (with a header line) from a CSV file.
    pub fn from_csv(path: impl AsRef<Path>, ridge: f64) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file, &path.display().to_string(), ridge)
    }

    pub fn from_csv_reader(reader: impl Read, source: &str, ridge: f64) -> Result<Self> {
        let csv_err = |line: u64, message: String| Error::Csv {
            path: source.to_string(),
            line,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| csv_err(1, e.to_string()))?
            .clone();
        if header.len() < 2 || &header[0] != "y" {
            return Err(csv_err(
                1,
                "header must be `y,x1,...,xp` with at least one feature".into(),
            ));
        }
        let p = header.len() - 1;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |pos| pos.line());
                csv_err(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |pos| pos.line());
            if record.len() != p + 1 {
                return Err(csv_err(
                    line,
                    format!("expected {} fields, found {}", p + 1, record.len()),
                ));
            }
            let mut row = Vec::with_capacity(p + 1);
            for (i, field) in record.iter().enumerate() {
                let x: f64 = field
                    .parse()
                    .map_err(|_| csv_err(line, format!("field {} is not a number: {field:?}", i + 1)))?;
                if !x.is_finite() {
                    return Err(csv_err(line, format!("field {} is not finite", i + 1)));
                }
                row.push(x);
            }
            if row[0] != 1.0 && row[0] != -1.0 {
                return Err(csv_err(line, format!("label must be -1 or +1, got {}", row[0])));
            }
            labels.push(row[0]);
            values.extend_from_slice(&row[1..]);
        }
        let design = DMatrix::from_row_slice(labels.len(), p, &values);
        Self::new(design, labels, ridge)
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    fn margins(&self, theta: &[f64]) -> Vec<f64> {
        let p = self.spec.dimension;
        (0..self.labels.len())
            .map(|i| {
                let mut dot = 0.0;
                for j in 0..p {
                    dot += self.design[(i, j)] * theta[j];
                }
                self.labels[i] * dot
            })
            .collect()
    }

    fn newton_minimizer(&self) -> Result<Vec<f64>> {
        let p = self.spec.dimension;
        let mut theta = vec![0.0; p];
        let mut grad = vec![0.0; p];
        let tol = 1e-10 * self.spec.smoothness;
        for _ in 0..100 {
            self.grad_into(&theta, &mut grad);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let scale = 1.0 + theta.iter().map(|t| t * t).sum::<f64>().sqrt();
            if norm <= tol * scale {
                return Ok(theta);
            }
            let mut hess = DMatrix::from_diagonal_element(p, p, self.ridge);
            for (i, z) in self.margins(&theta).into_iter().enumerate() {
                let s = sigmoid(z);
                let w = s * (1.0 - s);
                let x = self.design.row(i);
                for a in 0..p {
                    for b in 0..p {
                        hess[(a, b)] += w * x[a] * x[b];
                    }
                }
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Internal("logistic Hessian not positive definite".into()))?
                .solve(&DVector::from_column_slice(&grad));
            // Damped Newton: halve until the objective decreases.
            let f0 = self.value(&theta);
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, d)| x - t * d).collect();
                if self.value(&trial) <= f0 || t < 1e-8 {
                    theta = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        Err(Error::Internal(
            "Newton iteration for the logistic minimizer did not converge".into(),
        ))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^{-z})
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl Potential for LogisticRidgePotential {
    fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let loss: f64 = self.margins(theta).into_iter().map(softplus_neg).sum();
        loss + 0.5 * self.ridge * theta.iter().map(|t| t * t).sum::<f64>()
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        let p = self.spec.dimension;
        for j in 0..p {
            out[j] = self.ridge * theta[j];
        }
        for (i, z) in self.margins(theta).into_iter().enumerate() {
            // d/dθ log(1+e^{-z}) = -σ(-z) y x
            let w = -self.labels[i] * sigmoid(-z);
            for j in 0..p {
                out[j] += w * self.design[(i, j)];
            }
        }
    }
}

/// Wraps a potential so every gradient costs at least `delay` of wall time.
/// Used to emulate expensive oracles when measuring parallel speedup.
pub struct DelayedPotential<P> {
    inner: P,
    delay: Duration,
}

impl<P: Potential> DelayedPotential<P> {
    pub fn new(inner: P, delay: Duration) -> Self {
        Self { inner, delay }
    }
}

impl<P: Potential> Potential for DelayedPotential<P> {
    fn spec(&self) -> &PotentialSpec {
        self.inner.spec()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        self.inner.value(theta)
    }

    fn grad_into(&self, theta: &[f64], out: &mut [f64]) {
        std::thread::sleep(self.delay);
        self.inner.grad_into(theta, out);
    }

    fn gaussian_target(&self) -> Option<GaussianSummary> {
        self.inner.gaussian_target()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_logistic(n: usize, p: usize, seed: u64) -> LogisticRidgePotential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let design = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5));
        let labels = (0..n)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        LogisticRidgePotential::new(design, labels, 0.7).unwrap()
    }

    fn rotated_quadratic(p: usize, seed: u64) -> QuadraticPotential {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DMatrix::from_fn(p, p, |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q();
        let eig = DVector::from_fn(p, |i, _| 1.0 + 9.0 * i as f64 / (p - 1) as f64);
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        let a = (&a + a.transpose()) * 0.5;
        let mean = (0..p).map(|i| i as f64 * 0.1).collect();
        QuadraticPotential::new(a, Some(mean)).unwrap()
    }

    #[test]
    fn quadratic_identity_gradient() {
        let f = QuadraticPotential::standard(2).unwrap();
        let c = EvalCounter::new();
        let g = GradientOracle::new(&f, &c).gradient(&[1.0, 2.0]).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
        assert_eq!(c.total_gradient_evals(), 1);
    }

    #[test]
    fn quadratic_shifted_diagonal_gradient() {
        let f = QuadraticPotential::diagonal(&[1.0, 10.0], Some(vec![1.0, 0.0])).unwrap();
        let c = EvalCounter::new();
        let g = GradientOracle::new(&f, &c).gradient(&[2.0, 1.0]).unwrap();
        assert_eq!(g, vec![1.0, 10.0]);
        assert_eq!(f.spec().strong_convexity, 1.0);
        assert_eq!(f.spec().smoothness, 10.0);
        assert_eq!(f.spec().kappa(), 10.0);
    }

    #[test]
    fn logistic_single_datum_at_origin() {
        let f = LogisticRidgePotential::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), vec![1.0], 1.0)
            .unwrap();
        let c = EvalCounter::new();
        let g = GradientOracle::new(&f, &c).gradient(&[0.0, 0.0]).unwrap();
        assert_eq!(g, vec![-0.5, 0.0]);
        // m = λ, M = λ + ‖X‖²/4
        assert_eq!(f.spec().strong_convexity, 1.0);
        assert!((f.spec().smoothness - 1.25).abs() < 1e-14);
    }

    #[test]
    fn gradient_rejects_bad_input() {
        let f = QuadraticPotential::standard(2).unwrap();
        let c = EvalCounter::new();
        let o = GradientOracle::new(&f, &c);
        assert!(matches!(o.gradient(&[1.0]), Err(Error::Config(_))));
        assert!(matches!(o.gradient(&[1.0, f64::NAN]), Err(Error::Domain(_))));
        assert_eq!(c.total_gradient_evals(), 0);
    }

    #[test]
    fn batch_round_accounting() {
        let f = QuadraticPotential::standard(3).unwrap();
        let pts = vec![vec![1.0, 0.0, 0.0]; 4];
        let c = EvalCounter::new();
        let o = GradientOracle::new(&f, &c);
        o.gradient_batch(&pts, 4).unwrap();
        assert_eq!(c.sequential_rounds(), 1);
        o.gradient_batch(&pts, 2).unwrap();
        assert_eq!(c.sequential_rounds(), 3);
        assert_eq!(c.total_gradient_evals(), 8);
        assert!(o.gradient_batch(&pts, 0).is_err());
    }

    #[test]
    fn batch_at_minimizer_vanishes() {
        let f = rotated_quadratic(5, 3);
        let c = EvalCounter::new();
        let star = f.spec().minimizer.clone().unwrap();
        let g = GradientOracle::new(&f, &c).gradient_batch(&[star], 1).unwrap();
        assert!(g[0].iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn minimizer_invariant_both_potentials() {
        let potentials: Vec<Box<dyn Potential>> =
            vec![Box::new(rotated_quadratic(6, 1)), Box::new(toy_logistic(40, 4, 2))];
        for f in potentials {
            let star = f.spec().minimizer.clone().unwrap();
            let mut g = vec![0.0; star.len()];
            f.grad_into(&star, &mut g);
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let scale = 1.0 + star.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(norm <= 1e-8 * f.spec().smoothness * scale, "norm {norm}");
        }
    }

    #[test]
    fn fd_check_quadratic_is_exact() {
        let f = rotated_quadratic(6, 9);
        let theta = [0.3, -1.2, 0.5, 2.0, -0.7, 0.1];
        assert!(check_gradient_fd(&f, &theta, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn fd_check_logistic() {
        let f = toy_logistic(60, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let theta: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            assert!(check_gradient_fd(&f, &theta, 1e-5).unwrap() < 1e-6);
        }
    }

    #[test]
    fn fd_check_rejects_bad_step() {
        let f = QuadraticPotential::standard(2).unwrap();
        assert!(matches!(check_gradient_fd(&f, &[0.0, 0.0], 0.0), Err(Error::Domain(_))));
        assert!(matches!(check_gradient_fd(&f, &[0.0, 0.0], 1e-2), Err(Error::Domain(_))));
    }

    #[test]
    fn non_spd_precision_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(QuadraticPotential::new(a, None).is_err());
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticPotential::new(a, None).is_err());
    }

    #[test]
    fn csv_ingest_and_errors() {
        let good = "y,x1,x2\n1,0.5,1.0\n-1,-0.2,0.3\n";
        let f = LogisticRidgePotential::from_csv_reader(good.as_bytes(), "mem", 1.0).unwrap();
        assert_eq!(f.dimension(), 2);
        assert_eq!(f.labels(), &[1.0, -1.0]);

        let ragged = "y,x1,x2\n1,0.5,1.0\n-1,0.3\n";
        let err = LogisticRidgePotential::from_csv_reader(ragged.as_bytes(), "mem", 1.0).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");

        let bad_label = "y,x1\n1,0.5\n0,0.1\n";
        let err = LogisticRidgePotential::from_csv_reader(bad_label.as_bytes(), "mem", 1.0).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");

        let not_num = "y,x1\n1,abc\n";
        let err = LogisticRidgePotential::from_csv_reader(not_num.as_bytes(), "mem", 1.0).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 2, .. }), "{err}");

        let bad_header = "label,x1\n1,0.5\n";
        assert!(LogisticRidgePotential::from_csv_reader(bad_header.as_bytes(), "mem", 1.0).is_err());
    }

    #[test]
    fn counter_is_exact_under_concurrency() {
        let f = QuadraticPotential::standard(3).unwrap();
        let c = EvalCounter::new();
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let o = GradientOracle::new(&f, &c);
                    for _ in 0..500 {
                        o.gradient(&[1.0, 2.0, 3.0]).unwrap();
                    }
                });
            }
        });
        assert_eq!(c.total_gradient_evals(), 4000);
    }

    fn sandwich_holds(f: &dyn Potential, a: &[f64], b: &[f64]) {
        let (m, big_m) = (f.spec().strong_convexity, f.spec().smoothness);
        let (mut ga, mut gb) = (vec![0.0; a.len()], vec![0.0; a.len()]);
        f.grad_into(a, &mut ga);
        f.grad_into(b, &mut gb);
        let dg: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| x - y).collect();
        let dx: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let inner: f64 = dg.iter().zip(&dx).map(|(x, y)| x * y).sum();
        let dx2: f64 = dx.iter().map(|x| x * x).sum();
        let dg_norm = dg.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tol = 1e-10 * (1.0 + dx2);
        assert!(inner >= m * dx2 - tol, "strong convexity: {inner} < {}", m * dx2);
        assert!(dg_norm <= big_m * dx2.sqrt() + tol, "smoothness: {dg_norm} > {}", big_m * dx2.sqrt());
    }

    #[test]
    fn curvature_sandwich_random_pairs() {
        let quad = rotated_quadratic(5, 11);
        let logit = toy_logistic(30, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            sandwich_holds(&quad, &a, &b);
            sandwich_holds(&logit, &a, &b);
        }
    }

    proptest! {
        #[test]
        fn batch_matches_single(points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..9), width in 1usize..5) {
            let f = toy_logistic(20, 4, 21);
            let c = EvalCounter::new();
            let o = GradientOracle::new(&f, &c);
            let batch = o.gradient_batch(&points, width).unwrap();
            for (x, g) in points.iter().zip(&batch) {
                prop_assert_eq!(&o.gradient(x).unwrap(), g);
            }
        }
    }
}
