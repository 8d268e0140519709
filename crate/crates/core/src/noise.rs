//! Exact joint simulation of the Gaussian vectors one outer iteration needs,
//! and the scalar coefficients of the two parallel schemes.
//!
//! Conventions: `U = (U_1, …, U_R)` are stratified midpoints, `T_r = h U_r`.
//! Vanilla noise is `ξ_r = √2 W(T_r)`, `ξ = √2 W(h)`. Kinetic noise is driven by
//! one Brownian path on `[0, h]`:
//!
//! ```text
//! ξ_r = √2 ∫_0^{T_r} (1 - e^{-γ(T_r - s)}) dW_s
//! ξ   = √2 ∫_0^{h}   (1 - e^{-γ(h - s)})   dW_s
//! ξ̄   = √2 ∫_0^{h}   e^{-γ(h - s)}         dW_s
//! ```
//!
//! Coordinates are independent and share the per-coordinate covariance.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Below this argument `psi` switches to its Taylor series.
pub const PSI_SERIES_THRESHOLD: f64 = 1e-4;

/// `ψ(x) = (1 - e^{-x}) / x`, with `ψ(0) = 1`.
pub fn psi(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::domain(format!("psi is defined for x >= 0, got {x}")));
    }
    Ok(psi_unchecked(x))
}

#[inline]
pub(crate) fn psi_unchecked(x: f64) -> f64 {
    if x < PSI_SERIES_THRESHOLD {
        1.0 - x / 2.0 * (1.0 - x / 3.0 * (1.0 - x / 4.0))
    } else {
        -(-x).exp_m1() / x
    }
}

// 1 - ψ(x) without the cancellation of `1.0 - psi(x)` for small x.
fn one_minus_psi(x: f64) -> f64 {
    if x < 0.5 {
        // Σ_{k≥1} (-1)^{k+1} x^k / (k+1)!
        let mut term = x / 2.0;
        let mut sum = 0.0f64;
        let mut k = 1.0;
        while term.abs() > 1e-18 * sum.abs().max(f64::MIN_POSITIVE) {
            sum += term;
            k += 1.0;
            term *= -x / (k + 1.0);
        }
        sum
    } else {
        1.0 - psi_unchecked(x)
    }
}

/// Stratified midpoints, `U_r ∈ [(r-1)/R, r/R]`, strictly increasing.
#[derive(Clone, Debug, PartialEq)]
pub struct MidpointDraw {
    values: Vec<f64>,
}

impl MidpointDraw {
    /// Accepts user-fixed midpoints; each must lie in its stratum.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let r = values.len();
        if r == 0 {
            return Err(Error::config("at least one midpoint is required"));
        }
        let rf = r as f64;
        for (i, &u) in values.iter().enumerate() {
            let (lo, hi) = (i as f64 / rf, (i + 1) as f64 / rf);
            if !(u >= lo && u <= hi) {
                return Err(Error::config(format!(
                    "midpoint U_{} = {u} outside its stratum [{lo}, {hi}]",
                    i + 1
                )));
            }
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("midpoints must be strictly increasing"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `U_r` with 1-based `r`.
    pub fn get(&self, r: usize) -> f64 {
        self.values[r - 1]
    }
}

/// Draws `U_r` uniformly on `[(r-1)/R, r/R]` for `r = 1..=R`.
pub fn draw_midpoints<G: Rng + ?Sized>(r: usize, rng: &mut G) -> Result<MidpointDraw> {
    if r == 0 {
        return Err(Error::config("number of midpoints R must be positive"));
    }
    let rf = r as f64;
    let mut values = Vec::with_capacity(r);
    for i in 0..r {
        let w: f64 = rng.random();
        let mut u = (i as f64 + w) / rf;
        if let Some(&prev) = values.last() {
            // Equal neighbours only arise from rounding at a stratum edge.
            if u <= prev {
                u = f64::next_up(prev);
            }
        }
        values.push(u);
    }
    Ok(MidpointDraw { values })
}

fn check_indices(r_total: usize, j: usize, r: usize) -> Result<()> {
    if j == 0 || r == 0 || r > r_total {
        return Err(Error::Index(format!(
            "indices must satisfy 1 <= j <= r <= R (j = {j}, r = {r}, R = {r_total})"
        )));
    }
    if j > r {
        return Err(Error::Index(format!("j = {j} exceeds r = {r}")));
    }
    Ok(())
}

/// `a_{jr} = min{1/R, U_r - (j-1)/R}` (vanilla inner-update weight, before
/// multiplication by `h`).
pub fn coeff_a_vanilla(u: &MidpointDraw, j: usize, r: usize) -> Result<f64> {
    check_indices(u.len(), j, r)?;
    Ok(vanilla_weight(u.len(), u.get(r), j))
}

#[inline]
pub(crate) fn vanilla_weight(r_total: usize, u_r: f64, j: usize) -> f64 {
    let rf = r_total as f64;
    (1.0 / rf).min(u_r - (j - 1) as f64 / rf).max(0.0)
}

/// `b_{jr} = ∫_{(j-1)h/R}^{(h/R) min(j, R U_r)} (1 - e^{-γ(h U_r - s)}) ds`.
///
/// Evaluated as `L (1 - e^{-γ(T - u₂)} ψ(γ L))` with `L = u₂ - u₁`, `T = h U_r`,
/// which stays accurate as `γ → 0`.
pub fn coeff_b_kinetic(gamma: f64, h: f64, u: &MidpointDraw, j: usize, r: usize) -> Result<f64> {
    check_indices(u.len(), j, r)?;
    if !(gamma > 0.0 && h > 0.0) {
        return Err(Error::domain(format!(
            "friction and step must be positive (gamma = {gamma}, h = {h})"
        )));
    }
    Ok(kinetic_weight(gamma, h, u.len(), u.get(r), j))
}

#[inline]
pub(crate) fn kinetic_weight(gamma: f64, h: f64, r_total: usize, u_r: f64, j: usize) -> f64 {
    let rf = r_total as f64;
    let sub = h / rf;
    let lower = (j - 1) as f64 * sub;
    let upper = sub * (j as f64).min(rf * u_r);
    let len = (upper - lower).max(0.0);
    let t = h * u_r;
    let decay = (-gamma * (t - upper).max(0.0)).exp();
    len * (1.0 - decay * psi_unchecked(gamma * len))
}

/// `(ξ_1, …, ξ_R)` and `ξ` for one vanilla outer iteration; each vector has
/// length `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaNoiseDraw {
    pub xi_mid: Vec<Vec<f64>>,
    pub xi_full: Vec<f64>,
}

impl VanillaNoiseDraw {
    pub fn zeros(r: usize, p: usize) -> Self {
        Self {
            xi_mid: vec![vec![0.0; p]; r],
            xi_full: vec![0.0; p],
        }
    }
}

/// Builds `√2 W` at the ordered times `hU_1 < … < hU_R < h` from independent
/// increments. Exact joint law, `O(R p)`.
pub fn draw_vanilla_noise<G: Rng + ?Sized>(
    h: f64,
    p: usize,
    u: &MidpointDraw,
    rng: &mut G,
) -> Result<VanillaNoiseDraw> {
    if !(h > 0.0) {
        return Err(Error::domain(format!("step must be positive, got {h}")));
    }
    if u.values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Internal(format!(
            "midpoints not strictly increasing: {:?}",
            u.values
        )));
    }
    let mut out = VanillaNoiseDraw::zeros(u.len(), p);
    draw_vanilla_into(h, u, rng, &mut out);
    Ok(out)
}

/// Fills a pre-sized draw; `h` and `u` are assumed valid.
pub(crate) fn draw_vanilla_into<G: Rng + ?Sized>(h: f64, u: &MidpointDraw, rng: &mut G, out: &mut VanillaNoiseDraw) {
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut prev = 0.0;
    for (r, &ur) in u.values.iter().enumerate() {
        let sd = (h * (ur - prev)).sqrt();
        let (done, rest) = out.xi_mid.split_at_mut(r);
        let slot = &mut rest[0];
        for (i, x) in slot.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            let before = if r == 0 { 0.0 } else { done[r - 1][i] };
            *x = before + sqrt2 * sd * z;
        }
        prev = ur;
    }
    let sd = (h * (1.0 - prev).max(0.0)).sqrt();
    let last = out.xi_mid.last().map(|v| v.as_slice());
    for (i, x) in out.xi_full.iter_mut().enumerate() {
        let z: f64 = rng.sample(StandardNormal);
        let before = last.map_or(0.0, |v| v[i]);
        *x = before + sqrt2 * sd * z;
    }
}

/// Per-coordinate covariance `2 h min(U_i, U_j)` of `(ξ_1, …, ξ_R, ξ)`.
pub fn vanilla_covariance(h: f64, u: &MidpointDraw) -> DMatrix<f64> {
    let n = u.len() + 1;
    let time = |i: usize| if i < u.len() { u.values[i] } else { 1.0 };
    DMatrix::from_fn(n, n, |i, j| 2.0 * h * time(i).min(time(j)))
}

/// `(ξ_1, …, ξ_R)`, `ξ` and `ξ̄` for one kinetic outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct KineticNoiseDraw {
    pub xi_mid: Vec<Vec<f64>>,
    pub xi_full: Vec<f64>,
    pub xi_bar: Vec<f64>,
}

impl KineticNoiseDraw {
    pub fn zeros(r: usize, p: usize) -> Self {
        Self {
            xi_mid: vec![vec![0.0; p]; r],
            xi_full: vec![0.0; p],
            xi_bar: vec![0.0; p],
        }
    }
}

fn kinetic_covariance_flat(gamma: f64, h: f64, u: &[f64]) -> Vec<f64> {
    let r = u.len();
    let n = r + 2;
    // Horizons of the ξ-type variables: T_1..T_R, then h.
    let horizon = |i: usize| if i < r { h * u[i] } else { h };
    let mut cov = vec![0.0; n * n];
    for i in 0..=r {
        for j in i..=r {
            let (ta, tb) = {
                let (a, b) = (horizon(i), horizon(j));
                if a <= b { (a, b) } else { (b, a) }
            };
            let x = gamma * ta;
            let e = (-gamma * (tb - ta)).exp();
            let lead = x * one_minus_psi(x);
            let xp = x * psi_unchecked(x);
            let v = 2.0 / gamma * (lead - e * xp * xp / 2.0);
            cov[i * n + j] = v;
            cov[j * n + i] = v;
        }
        let ta = horizon(i);
        let x = gamma * ta;
        let xp = x * psi_unchecked(x);
        let v = (-gamma * (h - ta)).exp() * xp * xp / gamma;
        cov[i * n + r + 1] = v;
        cov[(r + 1) * n + i] = v;
    }
    cov[n * n - 1] = 2.0 * h * psi_unchecked(2.0 * gamma * h);
    cov
}

/// Closed-form per-coordinate covariance of `(ξ_1, …, ξ_R, ξ, ξ̄)` by Itô
/// isometry. Fails if the assembled matrix has an eigenvalue below `-1e-10`.
pub fn kinetic_covariance(gamma: f64, h: f64, u: &MidpointDraw) -> Result<DMatrix<f64>> {
    if !(gamma > 0.0 && h > 0.0) {
        return Err(Error::domain(format!(
            "friction and step must be positive (gamma = {gamma}, h = {h})"
        )));
    }
    let n = u.len() + 2;
    let cov = DMatrix::from_row_slice(n, n, &kinetic_covariance_flat(gamma, h, &u.values));
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 {
        return Err(Error::Internal(format!(
            "kinetic covariance not PSD (min eigenvalue {min_eig:e}) for gamma = {gamma}, h = {h}, U = {:?}",
            u.values
        )));
    }
    Ok(cov)
}

// Lower Cholesky factor (row-major) of a PSD matrix. Pivots within `tol` of
// zero produce zero columns; anything more negative fails.
fn cholesky_psd(a: &[f64], n: usize, tol: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        let scale = a[j * n + j].abs();
        if d < -tol * scale {
            return None;
        }
        if d <= tol * scale {
            // Degenerate direction: the variable is (numerically) determined by
            // the previous ones.
            continue;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

/// Cholesky factor of the kinetic covariance for fixed `(γ, h, U)`; draws any
/// number of independent noise vectors from it.
#[derive(Clone, Debug)]
pub struct KineticNoiseFactor {
    lower: Vec<f64>,
    r: usize,
}

/// Largest diagonal jitter tried when the plain factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-12;

impl KineticNoiseFactor {
    pub fn new(gamma: f64, h: f64, u: &MidpointDraw) -> Result<Self> {
        if !(gamma > 0.0 && h > 0.0) {
            return Err(Error::domain(format!(
                "friction and step must be positive (gamma = {gamma}, h = {h})"
            )));
        }
        let r = u.len();
        let n = r + 2;
        let mut cov = kinetic_covariance_flat(gamma, h, &u.values);
        if let Some(lower) = cholesky_psd(&cov, n, 1e-12) {
            return Ok(Self { lower, r });
        }
        for i in 0..n {
            cov[i * n + i] += CHOLESKY_JITTER;
        }
        cholesky_psd(&cov, n, 1e-12)
            .map(|lower| Self { lower, r })
            .ok_or_else(|| {
                Error::Internal(format!(
                    "Cholesky of kinetic covariance failed for gamma = {gamma}, h = {h}, U = {:?}",
                    u.values
                ))
            })
    }

    /// Lower-triangular factor, row-major `(R+2)×(R+2)`.
    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn draw<G: Rng + ?Sized>(&self, p: usize, rng: &mut G) -> KineticNoiseDraw {
        let mut out = KineticNoiseDraw::zeros(self.r, p);
        self.draw_into(rng, &mut out);
        out
    }

    pub(crate) fn draw_into<G: Rng + ?Sized>(&self, rng: &mut G, out: &mut KineticNoiseDraw) {
        let r = self.r;
        let n = r + 2;
        let p = out.xi_full.len();
        let mut z = vec![0.0; n];
        for coord in 0..p {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..n {
                let row = &self.lower[i * n..i * n + i + 1];
                let y: f64 = row.iter().zip(&z).map(|(l, zk)| l * zk).sum();
                if i < r {
                    out.xi_mid[i][coord] = y;
                } else if i == r {
                    out.xi_full[coord] = y;
                } else {
                    out.xi_bar[coord] = y;
                }
            }
        }
    }
}

/// One exact draw of the kinetic noise given `U`.
pub fn draw_kinetic_noise<G: Rng + ?Sized>(
    gamma: f64,
    h: f64,
    p: usize,
    u: &MidpointDraw,
    rng: &mut G,
) -> Result<KineticNoiseDraw> {
    Ok(KineticNoiseFactor::new(gamma, h, u)?.draw(p, rng))
}

#[cfg(test)]
pub(crate) mod quadrature {
    /// Adaptive Simpson on `[a, b]` to absolute tolerance `tol`.
    pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let fa = f(a);
        let fb = f(b);
        let m = 0.5 * (a + b);
        let fm = f(m);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        step(f, a, b, fa, fm, fb, whole, tol, 60)
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
}
