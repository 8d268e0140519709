//! Parameter selection for a target accuracy `ε √(p/m)` in W2, and the
//! stability preconditions the error bounds assume.
//!
//! All logarithms are natural.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::PotentialSpec;
use crate::samplers::SamplerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Vanilla,
    Kinetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditionCheck {
    pub name: String,
    pub lhs: f64,
    pub threshold: f64,
    /// `threshold - lhs`; nonnegative when the condition holds.
    pub margin: f64,
    pub holds: bool,
}

impl PreconditionCheck {
    fn at_most(name: &str, lhs: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            threshold,
            margin: threshold - lhs,
            holds: lhs <= threshold,
        }
    }

    fn at_least(name: &str, lhs: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            lhs,
            threshold,
            margin: lhs - threshold,
            holds: lhs >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreconditionReport {
    pub regime: Regime,
    pub normalized_step: f64,
    pub checks: Vec<PreconditionCheck>,
    pub holds: bool,
}

impl PreconditionReport {
    fn new(regime: Regime, normalized_step: f64, checks: Vec<PreconditionCheck>) -> Self {
        let holds = checks.iter().all(|c| c.holds);
        Self {
            regime,
            normalized_step,
            checks,
            holds,
        }
    }
}

/// `h̄^Q + h̄/R + (h̄^{Q-1} + h̄/R^{3/2}) √(κh̄) ≤ 0.1`, `h̄ = Mh`.
pub fn vanilla_precondition(hb: f64, points: usize, inner_steps: usize, kappa: f64) -> PreconditionCheck {
    let r = points as f64;
    let q = inner_steps as i32;
    let lhs = hb.powi(q) + hb / r + (hb.powi(q - 1) + hb / r.powf(1.5)) * (kappa * hb).sqrt();
    PreconditionCheck::at_most("stability", lhs, 0.1)
}

/// `γ ≥ 5M` and `κ (h̄⁶/R³ + h̄^{4Q-2}) ≤ 1e-6`, `h̄ = γh`.
pub fn kinetic_precondition(
    hb: f64,
    points: usize,
    inner_steps: usize,
    kappa: f64,
    friction: f64,
    smoothness: f64,
) -> PreconditionReport {
    let r = points as f64;
    let q = inner_steps as i32;
    let lhs = kappa * (hb.powi(6) / r.powi(3) + hb.powi(4 * q - 2));
    PreconditionReport::new(
        Regime::Kinetic,
        hb,
        vec![
            PreconditionCheck::at_least("friction", friction, 5.0 * smoothness),
            PreconditionCheck::at_most("stability", lhs, 1e-6),
        ],
    )
}

/// Evaluates the relevant precondition for a sampler configuration.
pub fn check_preconditions(config: &SamplerConfig, spec: &PotentialSpec, regime: Regime) -> Result<PreconditionReport> {
    let (points, inner_steps) = config.shape();
    match regime {
        Regime::Vanilla => {
            let hb = spec.smoothness * config.step_size;
            let check = vanilla_precondition(hb, points, inner_steps, spec.kappa());
            Ok(PreconditionReport::new(Regime::Vanilla, hb, vec![check]))
        }
        Regime::Kinetic => {
            let gamma = config
                .friction
                .ok_or_else(|| Error::config("kinetic precondition needs a friction value"))?;
            Ok(kinetic_precondition(
                gamma * config.step_size,
                points,
                inner_steps,
                spec.kappa(),
                gamma,
                spec.smoothness,
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneRequest {
    pub epsilon: f64,
    /// `m`.
    pub strong_convexity: f64,
    /// `M`.
    pub smoothness: f64,
    /// Optional; must agree with `M/m` when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    pub dimension: usize,
    /// Estimate of `W2(ν₀, π)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_initial: Option<f64>,
    pub regime: Regime,
    /// Fixed number of parallel gradient slots (limited-units regime).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_points: Option<usize>,
}

impl TuneRequest {
    pub fn new(epsilon: f64, strong_convexity: f64, smoothness: f64, dimension: usize, regime: Regime) -> Self {
        Self {
            epsilon,
            strong_convexity,
            smoothness,
            kappa: None,
            dimension,
            w2_initial: None,
            regime,
            fixed_points: None,
        }
    }

    pub fn with_w2_initial(mut self, w2: f64) -> Self {
        self.w2_initial = Some(w2);
        self
    }

    fn validate(&self) -> Result<f64> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::domain(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        let spec = PotentialSpec::new(self.dimension, self.strong_convexity, self.smoothness, None)?;
        let kappa = spec.kappa();
        if let Some(k) = self.kappa {
            if !(k >= 1.0) || ((k - kappa) / kappa).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "kappa = {k} disagrees with smoothness / strong_convexity = {kappa}"
                )));
            }
        }
        if let Some(w2) = self.w2_initial {
            if !(w2 >= 0.0 && w2.is_finite()) {
                return Err(Error::config(format!("w2_initial must be nonnegative, got {w2}")));
            }
        }
        if self.fixed_points == Some(0) {
            return Err(Error::config("fixed_points must be positive"));
        }
        Ok(kappa)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunePlan {
    pub regime: Regime,
    pub points: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<f64>,
    pub normalized_step: f64,
    pub predicted_sequential_rounds: u64,
    pub predicted_gradient_evals: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w2_initial: Option<f64>,
    /// Order-of-magnitude iteration count for the fixed-`R` regime.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limited_units_guidance: Option<f64>,
    pub preconditions: PreconditionReport,
    pub warnings: Vec<String>,
}

// `⌈scale κ {log(c/ε) + log((m/p) W2²)}⌉`, at least 1.
fn iteration_count(
    scale: f64,
    c: f64,
    kappa: f64,
    req: &TuneRequest,
    warnings: &mut Vec<String>,
) -> u64 {
    let mut bracket = (c / req.epsilon).ln();
    match req.w2_initial {
        Some(w2) => bracket += (req.strong_convexity / req.dimension as f64 * w2 * w2).ln(),
        None => warnings.push(
            "no W2(nu0, pi) estimate given; iteration count omits the initialization term".into(),
        ),
    }
    let raw = (scale * kappa * bracket).ceil();
    if raw.is_nan() || raw < 1.0 {
        1
    } else {
        raw as u64
    }
}

fn finish(mut plan: TunePlan) -> TunePlan {
    if !plan.preconditions.holds {
        plan.warnings
            .push("tuned parameters do not satisfy the error-bound precondition".into());
    }
    plan
}

/// `R = ⌈0.28(1+ε√κ)/ε²⌉`, `Q = ⌈2.2 + 0.7 log(√κ/ε)⌉`, `Mh = 0.1`,
/// `n = ⌈10κ{log(7/ε) + log((m/p)W2²)}⌉`.
pub fn tune_vanilla(req: &TuneRequest) -> Result<TunePlan> {
    if req.regime != Regime::Vanilla {
        return Err(Error::config("tune_vanilla called with a kinetic request"));
    }
    let kappa = req.validate()?;
    let eps = req.epsilon;
    let mut warnings = Vec::new();
    let formula_points = (0.28 * (1.0 + eps * kappa.sqrt()) / (eps * eps)).ceil() as usize;
    let points = req.fixed_points.unwrap_or(formula_points);
    let inner_steps = (2.2 + 0.7 * (kappa.sqrt() / eps).ln()).ceil().max(1.0) as usize;
    let hb = 0.1;
    let step_size = hb / req.smoothness;
    let iterations = iteration_count(10.0, 7.0, kappa, req, &mut warnings);
    let check = vanilla_precondition(hb, points, inner_steps, kappa);
    let limited = req
        .fixed_points
        .map(|r| iters_limited(Regime::Vanilla, kappa, eps, r).value);
    Ok(finish(TunePlan {
        regime: Regime::Vanilla,
        points,
        inner_steps,
        step_size,
        iterations,
        friction: None,
        normalized_step: hb,
        predicted_sequential_rounds: iterations * inner_steps as u64,
        predicted_gradient_evals: iterations * (inner_steps * points) as u64,
        w2_initial: req.w2_initial,
        limited_units_guidance: limited,
        preconditions: PreconditionReport::new(Regime::Vanilla, hb, vec![check]),
        warnings,
    }))
}

/// `γ = 5M`, `R = ⌈10/ε + κ^{1/3}/ε^{2/3}⌉`, `Q = 5 + ⌈0.7 log(√κ/ε)⌉`,
/// `γh = 0.1`, `n = ⌈25κ{log(22/ε) + log((m/p)W2²)}⌉`.
pub fn tune_kinetic(req: &TuneRequest) -> Result<TunePlan> {
    if req.regime != Regime::Kinetic {
        return Err(Error::config("tune_kinetic called with a vanilla request"));
    }
    let kappa = req.validate()?;
    let eps = req.epsilon;
    let mut warnings = Vec::new();
    let friction = 5.0 * req.smoothness;
    let formula_points = (10.0 / eps + kappa.cbrt() / eps.powf(2.0 / 3.0)).ceil() as usize;
    let points = req.fixed_points.unwrap_or(formula_points);
    let inner_steps = 5 + (0.7 * (kappa.sqrt() / eps).ln()).ceil().max(0.0) as usize;
    let hb = 0.1;
    let step_size = hb / friction;
    let iterations = iteration_count(25.0, 22.0, kappa, req, &mut warnings);
    let preconditions = kinetic_precondition(hb, points, inner_steps, kappa, friction, req.smoothness);
    let limited = req
        .fixed_points
        .map(|r| iters_limited(Regime::Kinetic, kappa, eps, r).value);
    Ok(finish(TunePlan {
        regime: Regime::Kinetic,
        points,
        inner_steps,
        step_size,
        iterations,
        friction: Some(friction),
        normalized_step: hb,
        predicted_sequential_rounds: iterations * inner_steps as u64,
        predicted_gradient_evals: iterations * (inner_steps * points) as u64,
        w2_initial: req.w2_initial,
        limited_units_guidance: limited,
        preconditions,
        warnings,
    }))
}

pub fn tune(req: &TuneRequest) -> Result<TunePlan> {
    match req.regime {
        Regime::Vanilla => tune_vanilla(req),
        Regime::Kinetic => tune_kinetic(req),
    }
}

/// Iteration-count guidance with a fixed number `R` of parallel slots.
/// The underlying statement only holds up to constants; the implied constant
/// here is 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitedIterations {
    pub value: f64,
    pub iterations: u64,
}

pub fn iters_limited(regime: Regime, kappa: f64, epsilon: f64, points: usize) -> LimitedIterations {
    let r = points.max(1) as f64;
    let e2 = epsilon * epsilon;
    let bracket = match regime {
        Regime::Vanilla => 1.0 + (kappa / (r * r * e2)).cbrt() + (1.0 / (r * e2)).sqrt(),
        Regime::Kinetic => 1.0 + (kappa / (r.powi(3) * e2)).powf(1.0 / 6.0) + (1.0 / (r * epsilon)).powf(2.0 / 3.0),
    };
    let value = kappa * (1.0 / epsilon).ln() * bracket;
    LimitedIterations {
        value,
        iterations: value.ceil().max(1.0) as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(eps: f64, kappa: f64, regime: Regime) -> TuneRequest {
        TuneRequest::new(eps, 1.0, kappa, 10, regime)
    }

    #[test]
    fn vanilla_reference_plan() {
        let plan = tune_vanilla(&request(0.5, 100.0, Regime::Vanilla)).unwrap();
        assert_eq!(plan.points, 7);
        assert_eq!(plan.inner_steps, 5);
        assert!((plan.step_size * 100.0 - 0.1).abs() < 1e-15);
        assert!(plan.preconditions.holds);
        assert!(plan.warnings.iter().any(|w| w.contains("W2")));
    }

    #[test]
    fn vanilla_single_slot_when_loose() {
        let plan = tune_vanilla(&request(0.999_999, 1.0, Regime::Vanilla)).unwrap();
        assert_eq!(plan.points, 1);
    }

    #[test]
    fn kinetic_reference_plan() {
        let plan = tune_kinetic(&request(0.5, 100.0, Regime::Kinetic)).unwrap();
        assert_eq!(plan.points, 28);
        assert_eq!(plan.inner_steps, 8);
        assert_eq!(plan.friction, Some(500.0));
        assert!((plan.friction.unwrap() * plan.step_size - 0.1).abs() < 1e-15);
        assert!((plan.step_size - 0.02 / 100.0).abs() < 1e-18);
        assert!(plan.preconditions.holds);
    }

    #[test]
    fn iteration_counts_use_w2_and_clamp() {
        let req = request(0.5, 100.0, Regime::Vanilla).with_w2_initial(10.0);
        let plan = tune_vanilla(&req).unwrap();
        let expected = (10.0 * 100.0 * ((7.0f64 / 0.5).ln() + (0.1f64 * 100.0).ln())).ceil() as u64;
        assert_eq!(plan.iterations, expected);
        assert_eq!(plan.predicted_sequential_rounds, expected * 5);
        assert_eq!(plan.predicted_gradient_evals, expected * 35);
        assert!(plan.warnings.is_empty());

        let tiny = request(0.5, 100.0, Regime::Kinetic).with_w2_initial(1e-12);
        assert_eq!(tune_kinetic(&tiny).unwrap().iterations, 1);
        let zero = request(0.5, 100.0, Regime::Kinetic).with_w2_initial(0.0);
        assert_eq!(tune_kinetic(&zero).unwrap().iterations, 1);
    }

    #[test]
    fn invalid_requests() {
        for eps in [0.0, 1.0, 1.5, -0.2, f64::NAN] {
            assert!(matches!(tune(&request(eps, 10.0, Regime::Vanilla)), Err(Error::Domain(_))));
        }
        let mut bad = request(0.5, 10.0, Regime::Vanilla);
        bad.kappa = Some(3.0);
        assert!(tune(&bad).is_err());
        assert!(tune_vanilla(&request(0.5, 10.0, Regime::Kinetic)).is_err());
    }

    #[test]
    fn precondition_reference_values() {
        let c = vanilla_precondition(0.1, 1, 2, 1.0);
        assert!((c.lhs - (0.01 + 0.1 + 0.2 * 0.1f64.sqrt())).abs() < 1e-15);
        assert!((c.lhs - 0.1732).abs() < 1e-4);
        assert!(!c.holds);

        let c = vanilla_precondition(0.01, 4, 3, 10.0);
        assert!((c.lhs - 0.002_927).abs() < 1e-6);
        assert!(c.holds && c.margin > 0.0);

        let k = kinetic_precondition(0.1, 1, 2, 10.0, 50.0, 10.0);
        assert!((k.checks[1].lhs - 2e-5).abs() < 1e-18);
        assert!(!k.holds);
        assert!(k.checks[0].holds);
    }

    #[test]
    fn limited_iterations() {
        let e = (-1.0f64).exp();
        let v = iters_limited(Regime::Vanilla, 1.0, e, 1);
        let expected = 1.0 + (2.0f64 / 3.0).exp() + 1.0f64.exp();
        assert!((v.value - expected).abs() < 1e-12);
        assert!((v.value - 5.6660).abs() < 1e-4);

        let big = iters_limited(Regime::Kinetic, 50.0, 0.1, 1 << 40);
        assert!((big.value - 50.0 * 10f64.ln()).abs() < 1.0);

        let vanilla = iters_limited(Regime::Vanilla, 100.0, 0.1, 10).value;
        let kinetic = iters_limited(Regime::Kinetic, 100.0, 0.1, 10).value;
        assert!(kinetic < vanilla);
    }

    #[test]
    fn limited_iterations_monotone() {
        for regime in [Regime::Vanilla, Regime::Kinetic] {
            for &eps in &[0.05, 0.3, 0.8] {
                let mut prev = f64::INFINITY;
                for r in 1..200 {
                    let v = iters_limited(regime, 50.0, eps, r).value;
                    assert!(v <= prev);
                    prev = v;
                }
                let mut prev = 0.0;
                for k in 1..200 {
                    let v = iters_limited(regime, k as f64, eps, 8).value;
                    assert!(v >= prev);
                    prev = v;
                }
            }
        }
    }

    const EPS_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9];
    const KAPPA_GRID: [f64; 7] = [1.0, 3.0, 10.0, 30.0, 100.0, 1e3, 1e4];

    #[test]
    fn tuned_plans_satisfy_preconditions_on_grid() {
        for &eps in &EPS_GRID {
            for &kappa in &KAPPA_GRID {
                let k = tune_kinetic(&request(eps, kappa, Regime::Kinetic)).unwrap();
                assert!(k.preconditions.holds, "kinetic eps={eps} kappa={kappa}");
                let v = tune_vanilla(&request(eps, kappa, Regime::Vanilla)).unwrap();
                if v.points >= 2 {
                    assert!(v.preconditions.holds, "vanilla eps={eps} kappa={kappa}");
                } else {
                    // With one slot the h̄/R term alone equals the 0.1 budget,
                    // so the precondition cannot hold; the plan must say so.
                    assert!(!v.preconditions.holds);
                    assert!(v.warnings.iter().any(|w| w.contains("precondition")));
                }
            }
        }
    }

    #[test]
    fn kinetic_needs_fewer_slots_at_high_precision() {
        for &eps in &[0.001, 0.005, 0.01, 0.02] {
            for &kappa in &KAPPA_GRID[2..] {
                let k = tune_kinetic(&request(eps, kappa, Regime::Kinetic)).unwrap();
                let v = tune_vanilla(&request(eps, kappa, Regime::Vanilla)).unwrap();
                assert!(k.points <= v.points, "eps={eps} kappa={kappa}: {} > {}", k.points, v.points);
            }
        }
    }
}
