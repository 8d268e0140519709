//! The five samplers over one shared inner-loop engine.
//!
//! Every outer iteration draws stratified midpoints `U`, the matching joint
//! noise, runs `Q - 1` refinement rounds of `R` gradients each and one final
//! round. The baselines are the engine at a fixed shape:
//!
//! | kind   | noise   | R | Q |
//! |--------|---------|---|---|
//! | LMC    | vanilla | 1 | 1 |
//! | RLMC   | vanilla | 1 | 2 |
//! | pRLMC  | vanilla | R | Q |
//! | RKLMC  | kinetic | 1 | 2 |
//! | pRKLMC | kinetic | R | Q |
//!
//! Draws for iteration `k` of chain `c` come from streams keyed on
//! `(seed, c, k)`, so a trajectory does not depend on scheduling or on what
//! other chains do.

use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use web_time::Instant;

use crate::error::{Error, Result};
use crate::noise::{
    draw_midpoints, draw_vanilla_into, kinetic_weight, psi_unchecked, vanilla_weight, KineticNoiseDraw,
    KineticNoiseFactor, MidpointDraw, VanillaNoiseDraw,
};
use crate::parallel::{prefix_row_into, Executor, LowerTriangular, ParallelWidth};
use crate::potentials::{CounterSnapshot, EvalCounter, GradientOracle, Potential};
use crate::rng::{StreamKey, StreamRole};
use crate::tuning::{check_preconditions, PreconditionReport, Regime};

/// `‖θ‖ > DIVERGENCE_FACTOR (1 + ‖θ₀‖)` aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Lmc,
    Rlmc,
    Prlmc,
    Rklmc,
    Prklmc,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 5] = [Self::Lmc, Self::Rlmc, Self::Prlmc, Self::Rklmc, Self::Prklmc];

    pub fn is_kinetic(self) -> bool {
        matches!(self, Self::Rklmc | Self::Prklmc)
    }

    pub fn regime(self) -> Regime {
        if self.is_kinetic() {
            Regime::Kinetic
        } else {
            Regime::Vanilla
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lmc => "lmc",
            Self::Rlmc => "rlmc",
            Self::Prlmc => "prlmc",
            Self::Rklmc => "rklmc",
            Self::Prklmc => "prklmc",
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown sampler kind {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPoint {
    /// `θ*` when the potential knows it, else the origin.
    #[default]
    Auto,
    Zero,
    Fixed(Vec<f64>),
    /// An exact draw from the target; Gaussian targets only.
    Target,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialVelocity {
    /// `N(0, γ I)`, the velocity marginal of the kinetic target.
    #[default]
    Stationary,
    Zero,
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub step_size: f64,
    /// `R`; ignored by the sequential baselines.
    #[serde(default = "one")]
    pub points: usize,
    /// `Q`; ignored by the sequential baselines.
    #[serde(default = "two")]
    pub inner_steps: usize,
    #[serde(default)]
    pub iterations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub friction: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub parallel_width: ParallelWidth,
    #[serde(default)]
    pub initial_point: InitialPoint,
    #[serde(default)]
    pub initial_velocity: InitialVelocity,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, step_size: f64) -> Self {
        Self {
            kind,
            step_size,
            points: 1,
            inner_steps: 2,
            iterations: 0,
            friction: None,
            seed: 0,
            parallel_width: ParallelWidth::Unbounded,
            initial_point: InitialPoint::Auto,
            initial_velocity: InitialVelocity::Stationary,
        }
    }

    pub fn with_points(mut self, points: usize) -> Self {
        self.points = points;
        self
    }

    pub fn with_inner_steps(mut self, inner_steps: usize) -> Self {
        self.inner_steps = inner_steps;
        self
    }

    pub fn with_iterations(mut self, iterations: u64) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_friction(mut self, friction: f64) -> Self {
        self.friction = Some(friction);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_parallel_width(mut self, width: ParallelWidth) -> Self {
        self.parallel_width = width;
        self
    }

    pub fn with_initial_point(mut self, init: InitialPoint) -> Self {
        self.initial_point = init;
        self
    }

    pub fn with_initial_velocity(mut self, init: InitialVelocity) -> Self {
        self.initial_velocity = init;
        self
    }

    /// The `(R, Q)` the engine actually runs.
    pub fn shape(&self) -> (usize, usize) {
        match self.kind {
            SamplerKind::Lmc => (1, 1),
            SamplerKind::Rlmc | SamplerKind::Rklmc => (1, 2),
            SamplerKind::Prlmc | SamplerKind::Prklmc => (self.points, self.inner_steps),
        }
    }

    /// Normalized step: `Mh` for vanilla kinds, `γh` for kinetic ones.
    pub fn normalized_step(&self, smoothness: f64) -> f64 {
        match (self.kind.is_kinetic(), self.friction) {
            (true, Some(g)) => g * self.step_size,
            _ => smoothness * self.step_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.points == 0 {
            return Err(Error::config("number of parallel points R must be positive"));
        }
        if self.inner_steps == 0 {
            return Err(Error::config("number of inner steps Q must be at least 1"));
        }
        if let ParallelWidth::Limited(0) = self.parallel_width {
            return Err(Error::config("parallel width must be positive"));
        }
        match (self.kind.is_kinetic(), self.friction) {
            (true, None) => Err(Error::config(format!("{} needs a friction value", self.kind))),
            (true, Some(g)) if !(g > 0.0 && g.is_finite()) => {
                Err(Error::config(format!("friction must be positive, got {g}")))
            }
            (false, Some(_)) => Err(Error::config(format!("{} takes no friction value", self.kind))),
            _ => Ok(()),
        }
    }

    fn validate_for(&self, potential: &dyn Potential) -> Result<()> {
        self.validate()?;
        let p = potential.dimension();
        if let InitialPoint::Fixed(x) = &self.initial_point {
            if x.len() != p || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("initial point must be {p} finite values")));
            }
        }
        if let InitialVelocity::Fixed(v) = &self.initial_velocity {
            if v.len() != p || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::config(format!("initial velocity must be {p} finite values")));
            }
        }
        if self.initial_point == InitialPoint::Target && potential.gaussian_target().is_none() {
            return Err(Error::config("initial_point = target needs a Gaussian target"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<f64>>,
    pub iteration: u64,
}

impl ChainState {
    pub fn new(theta: Vec<f64>, velocity: Option<Vec<f64>>) -> Self {
        Self {
            theta,
            velocity,
            iteration: 0,
        }
    }
}

/// Joint noise for one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseDraw {
    Vanilla(VanillaNoiseDraw),
    Kinetic(KineticNoiseDraw),
}

/// Everything random about one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraw {
    pub midpoints: MidpointDraw,
    pub noise: NoiseDraw,
}

impl StepDraw {
    /// The draw `run` uses for iteration `iteration` of chain `chain`.
    pub fn keyed(config: &SamplerConfig, dimension: usize, chain: u64, iteration: u64) -> Result<Self> {
        config.validate()?;
        let (r, _) = config.shape();
        let mut urng = StreamKey::new(config.seed, chain, iteration, StreamRole::Midpoints).rng();
        let midpoints = draw_midpoints(r, &mut urng)?;
        let mut nrng = StreamKey::new(config.seed, chain, iteration, StreamRole::Brownian).rng();
        let noise = match config.friction.filter(|_| config.kind.is_kinetic()) {
            Some(gamma) => {
                let factor = KineticNoiseFactor::new(gamma, config.step_size, &midpoints)?;
                NoiseDraw::Kinetic(factor.draw(dimension, &mut nrng))
            }
            None => {
                let mut out = VanillaNoiseDraw::zeros(r, dimension);
                draw_vanilla_into(config.step_size, &midpoints, &mut nrng, &mut out);
                NoiseDraw::Vanilla(out)
            }
        };
        Ok(Self { midpoints, noise })
    }

    /// Fixed midpoints with all noise set to zero.
    pub fn noiseless(config: &SamplerConfig, dimension: usize, midpoints: MidpointDraw) -> Result<Self> {
        let (r, _) = config.shape();
        if midpoints.len() != r {
            return Err(Error::config(format!("{} midpoints for R = {r}", midpoints.len())));
        }
        let noise = if config.kind.is_kinetic() {
            NoiseDraw::Kinetic(KineticNoiseDraw::zeros(r, dimension))
        } else {
            NoiseDraw::Vanilla(VanillaNoiseDraw::zeros(r, dimension))
        };
        Ok(Self { midpoints, noise })
    }

    fn check(&self, config: &SamplerConfig, p: usize) -> Result<()> {
        let (r, _) = config.shape();
        let (mid, full, kinetic) = match &self.noise {
            NoiseDraw::Vanilla(n) => (&n.xi_mid, &n.xi_full, false),
            NoiseDraw::Kinetic(n) => {
                if n.xi_bar.len() != p {
                    return Err(Error::config("noise override has the wrong dimension"));
                }
                (&n.xi_mid, &n.xi_full, true)
            }
        };
        if kinetic != config.kind.is_kinetic() {
            return Err(Error::config(format!("noise override kind does not match {}", config.kind)));
        }
        if self.midpoints.len() != r || mid.len() != r {
            return Err(Error::config(format!("noise override must cover R = {r} points")));
        }
        if full.len() != p || mid.iter().any(|v| v.len() != p) {
            return Err(Error::config("noise override has the wrong dimension"));
        }
        Ok(())
    }
}

/// Reusable buffers for one chain.
#[derive(Clone, Debug)]
struct Workspace {
    points: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    acc: Vec<f64>,
    acc_v: Vec<f64>,
    weights: LowerTriangular,
    drift: Vec<f64>,
    final_w: Vec<f64>,
    final_wv: Vec<f64>,
}

impl Workspace {
    fn new(r: usize, p: usize) -> Self {
        Self {
            points: vec![vec![0.0; p]; r],
            grads: vec![vec![0.0; p]; r],
            acc: vec![0.0; p],
            acc_v: vec![0.0; p],
            weights: LowerTriangular::zeros(r),
            drift: vec![0.0; r],
            final_w: vec![0.0; r],
            final_wv: vec![0.0; r],
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_finite(iteration: u64, x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence {
            iteration,
            norm: norm(x),
        })
    }
}

/// Advances `state` by one outer iteration using `draw`.
///
/// The weights are formed so that at `R = 1` every product reduces exactly
/// (`h/1 = h`, `min(1, U) = U`), which makes the baselines bitwise equal to
/// the corresponding parallel scheme at that shape.
fn engine_step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    executor: &Executor,
    state: &mut ChainState,
    draw: &StepDraw,
    ws: &mut Workspace,
) -> Result<()> {
    let (r_total, q_total) = config.shape();
    let h = config.step_size;
    let rf = r_total as f64;
    let sub = h / rf;
    let k = state.iteration;
    let u = draw.midpoints.values();

    // Weights for this iteration.
    match (&draw.noise, config.friction) {
        (NoiseDraw::Vanilla(_), _) => {
            for r in 0..r_total {
                for (j, w) in ws.weights.row_mut(r).iter_mut().enumerate() {
                    *w = h * vanilla_weight(r_total, u[r], j + 1);
                }
                ws.final_w[r] = sub;
            }
        }
        (NoiseDraw::Kinetic(_), Some(gamma)) => {
            for r in 0..r_total {
                for (j, w) in ws.weights.row_mut(r).iter_mut().enumerate() {
                    *w = kinetic_weight(gamma, h, r_total, u[r], j + 1);
                }
                let t = h * u[r];
                ws.drift[r] = t * psi_unchecked(gamma * t);
                let x = gamma * (h * (1.0 - u[r]));
                ws.final_w[r] = sub * (x * psi_unchecked(x));
                ws.final_wv[r] = gamma * sub * (-x).exp();
            }
        }
        (NoiseDraw::Kinetic(_), None) => return Err(Error::config("kinetic step needs a friction value")),
    }

    for pt in ws.points.iter_mut() {
        pt.copy_from_slice(&state.theta);
    }
    for _ in 1..q_total {
        executor.execute_into(oracle, &ws.points, config.parallel_width, &mut ws.grads)?;
        for r in 0..r_total {
            prefix_row_into(&ws.grads, ws.weights.row(r), &mut ws.acc);
            let pt = &mut ws.points[r];
            match &draw.noise {
                NoiseDraw::Vanilla(n) => {
                    for i in 0..pt.len() {
                        pt[i] = state.theta[i] - ws.acc[i] + n.xi_mid[r][i];
                    }
                }
                NoiseDraw::Kinetic(n) => {
                    let v = state.velocity.as_deref().unwrap_or_default();
                    let a = ws.drift[r];
                    for i in 0..pt.len() {
                        pt[i] = state.theta[i] + a * v[i] - ws.acc[i] + n.xi_mid[r][i];
                    }
                }
            }
            check_finite(k, pt)?;
        }
    }

    executor.execute_into(oracle, &ws.points, config.parallel_width, &mut ws.grads)?;
    prefix_row_into(&ws.grads, &ws.final_w, &mut ws.acc);
    match &draw.noise {
        NoiseDraw::Vanilla(n) => {
            for i in 0..state.theta.len() {
                state.theta[i] = state.theta[i] - ws.acc[i] + n.xi_full[i];
            }
        }
        NoiseDraw::Kinetic(n) => {
            let gamma = config.friction.unwrap_or_default();
            prefix_row_into(&ws.grads, &ws.final_wv, &mut ws.acc_v);
            let transport = h * psi_unchecked(gamma * h);
            let decay = (-gamma * h).exp();
            let v = state
                .velocity
                .as_mut()
                .ok_or_else(|| Error::config("kinetic step needs a velocity"))?;
            for i in 0..state.theta.len() {
                state.theta[i] = state.theta[i] + transport * v[i] - ws.acc[i] + n.xi_full[i];
                v[i] = decay * v[i] - ws.acc_v[i] + gamma * n.xi_bar[i];
            }
            check_finite(k, v)?;
        }
    }
    check_finite(k, &state.theta)?;
    state.iteration += 1;
    Ok(())
}

/// One outer iteration of `config.kind` on `state`.
///
/// With `noise = None` the draw comes from the keyed streams of
/// `(config.seed, chain, state.iteration)`, exactly as in [`run`]; passing a
/// draw overrides both midpoints and noise (test hook).
pub fn step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    config.validate()?;
    let p = oracle.dimension();
    if state.theta.len() != p {
        return Err(Error::config(format!("state has dimension {}, potential {p}", state.theta.len())));
    }
    if config.kind.is_kinetic() && state.velocity.as_ref().is_none_or(|v| v.len() != p) {
        return Err(Error::config(format!("{} needs a velocity of dimension {p}", config.kind)));
    }
    let keyed;
    let draw = match noise {
        Some(d) => {
            d.check(config, p)?;
            d
        }
        None => {
            keyed = StepDraw::keyed(config, p, chain, state.iteration)?;
            &keyed
        }
    };
    let (r, _) = config.shape();
    let mut ws = Workspace::new(r, p);
    engine_step(config, oracle, &Executor::Inline, state, draw, &mut ws)
}

fn step_as(
    kind: SamplerKind,
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    if config.kind != kind {
        return Err(Error::config(format!("{kind}_step called with a {} config", config.kind)));
    }
    step(config, oracle, state, chain, noise)
}

/// `θ ← θ - h∇f(θ) + ξ`.
pub fn lmc_step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    step_as(SamplerKind::Lmc, config, oracle, state, chain, noise)
}

pub fn rlmc_step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    step_as(SamplerKind::Rlmc, config, oracle, state, chain, noise)
}

pub fn prlmc_step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    step_as(SamplerKind::Prlmc, config, oracle, state, chain, noise)
}

pub fn rklmc_step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    step_as(SamplerKind::Rklmc, config, oracle, state, chain, noise)
}

pub fn prklmc_step(
    config: &SamplerConfig,
    oracle: &GradientOracle<'_>,
    state: &mut ChainState,
    chain: u64,
    noise: Option<&StepDraw>,
) -> Result<()> {
    step_as(SamplerKind::Prklmc, config, oracle, state, chain, noise)
}

/// Builds initial states; holds the target factor when initial points are
/// drawn from a Gaussian target.
struct Initializer {
    target: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl Initializer {
    fn new(config: &SamplerConfig, potential: &dyn Potential) -> Result<Self> {
        let target = match config.initial_point {
            InitialPoint::Target => {
                let g = potential
                    .gaussian_target()
                    .ok_or_else(|| Error::config("initial_point = target needs a Gaussian target"))?;
                let chol = nalgebra::Cholesky::new(g.covariance.clone())
                    .ok_or_else(|| Error::Input("target covariance is not positive definite".into()))?;
                Some((g.mean, chol.l()))
            }
            _ => None,
        };
        Ok(Self { target })
    }

    fn state(&self, config: &SamplerConfig, potential: &dyn Potential, chain: u64) -> ChainState {
        let p = potential.dimension();
        let mut rng = StreamKey::new(config.seed, chain, 0, StreamRole::Initial).rng();
        let theta = match &config.initial_point {
            InitialPoint::Auto => potential.spec().minimizer.clone().unwrap_or_else(|| vec![0.0; p]),
            InitialPoint::Zero => vec![0.0; p],
            InitialPoint::Fixed(x) => x.clone(),
            InitialPoint::Target => {
                let (mean, l) = self.target.as_ref().expect("target factor prepared");
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                (mean + l * z).as_slice().to_vec()
            }
        };
        let velocity = config.friction.filter(|_| config.kind.is_kinetic()).map(|gamma| {
            match &config.initial_velocity {
                InitialVelocity::Stationary => {
                    let sd = gamma.sqrt();
                    (0..p).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
                }
                InitialVelocity::Zero => vec![0.0; p],
                InitialVelocity::Fixed(v) => v.clone(),
            }
        });
        ChainState::new(theta, velocity)
    }
}

/// The initial state `run` would use for `chain`.
pub fn initial_state(config: &SamplerConfig, potential: &dyn Potential, chain: u64) -> Result<ChainState> {
    config.validate_for(potential)?;
    Ok(Initializer::new(config, potential)?.state(config, potential, chain))
}

/// A single chain driven iteration by iteration.
pub struct Chain<'a> {
    config: &'a SamplerConfig,
    potential: &'a dyn Potential,
    index: u64,
    state: ChainState,
    counter: EvalCounter,
    workspace: Workspace,
    threshold: f64,
}

impl<'a> Chain<'a> {
    pub fn new(config: &'a SamplerConfig, potential: &'a dyn Potential, index: u64) -> Result<Self> {
        let state = initial_state(config, potential, index)?;
        Ok(Self::from_state(config, potential, index, state, EvalCounter::new()))
    }

    fn from_state(
        config: &'a SamplerConfig,
        potential: &'a dyn Potential,
        index: u64,
        state: ChainState,
        counter: EvalCounter,
    ) -> Self {
        let (r, _) = config.shape();
        let threshold = DIVERGENCE_FACTOR * (1.0 + norm(&state.theta));
        Self {
            config,
            potential,
            index,
            workspace: Workspace::new(r, state.theta.len()),
            state,
            counter,
            threshold,
        }
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counter.snapshot()
    }

    pub fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    /// Runs `steps` outer iterations with production draws.
    pub fn advance(&mut self, executor: &Executor, steps: u64) -> Result<()> {
        let oracle = GradientOracle::new(self.potential, &self.counter);
        let p = self.state.theta.len();
        for _ in 0..steps {
            let draw = StepDraw::keyed(self.config, p, self.index, self.state.iteration)?;
            engine_step(self.config, &oracle, executor, &mut self.state, &draw, &mut self.workspace)?;
            let n = norm(&self.state.theta);
            if n > self.threshold {
                return Err(Error::Divergence {
                    iteration: self.state.iteration,
                    norm: n,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: u64,
    pub theta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocity: Option<Vec<f64>>,
    pub counters: CounterSnapshot,
    /// Seconds since the run started.
    pub elapsed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub iteration: u64,
    pub norm: f64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: SamplerConfig,
    pub snapshots: Vec<Snapshot>,
    pub counters: CounterSnapshot,
    pub wall_time: f64,
    pub preconditions: PreconditionReport,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceInfo>,
}

impl RunTrace {
    /// `Err(Divergence)` when the run was aborted.
    pub fn check(&self) -> Result<&Self> {
        match &self.divergence {
            Some(d) => Err(Error::Divergence {
                iteration: d.iteration,
                norm: d.norm,
            }),
            None => Ok(self),
        }
    }

    pub fn final_state(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }
}

fn precondition_warnings(config: &SamplerConfig, potential: &dyn Potential) -> Result<(PreconditionReport, Vec<String>)> {
    let report = check_preconditions(config, potential.spec(), config.kind.regime())?;
    let warnings = report
        .checks
        .iter()
        .filter(|c| !c.holds)
        .map(|c| {
            format!(
                "{} precondition '{}' fails: {:.6e} vs threshold {:.6e}",
                config.kind, c.name, c.lhs, c.threshold
            )
        })
        .collect();
    Ok((report, warnings))
}

/// Runs chain 0 for `config.iterations` steps, recording a snapshot every
/// `record_every` iterations and at the end.
pub fn run(config: &SamplerConfig, potential: &dyn Potential, record_every: u64) -> Result<RunTrace> {
    run_with(config, potential, record_every, &Executor::Inline)
}

pub fn run_with(
    config: &SamplerConfig,
    potential: &dyn Potential,
    record_every: u64,
    executor: &Executor,
) -> Result<RunTrace> {
    if record_every == 0 {
        return Err(Error::config("record_every must be positive"));
    }
    let (preconditions, warnings) = {
        config.validate_for(potential)?;
        precondition_warnings(config, potential)?
    };
    let state = initial_state(config, potential, 0)?;
    let mut chain = Chain::from_state(config, potential, 0, state, EvalCounter::with_round_times());
    let start = Instant::now();
    let snap = |chain: &Chain<'_>, start: Instant| Snapshot {
        iteration: chain.state.iteration,
        theta: chain.state.theta.clone(),
        velocity: chain.state.velocity.clone(),
        counters: chain.counters(),
        elapsed: start.elapsed().as_secs_f64(),
    };
    let mut snapshots = vec![snap(&chain, start)];
    let mut divergence = None;
    let mut done = 0;
    while done < config.iterations {
        let steps = record_every.min(config.iterations - done);
        match chain.advance(executor, steps) {
            Ok(()) => {}
            Err(Error::Divergence { iteration, norm }) => {
                divergence = Some(DivergenceInfo {
                    iteration,
                    norm,
                    message: format!("chain 0 diverged at iteration {iteration} (|theta| = {norm:e})"),
                });
                snapshots.push(snap(&chain, start));
                break;
            }
            Err(e) => return Err(e),
        }
        done += steps;
        snapshots.push(snap(&chain, start));
    }
    Ok(RunTrace {
        config: config.clone(),
        snapshots,
        counters: chain.counters(),
        wall_time: start.elapsed().as_secs_f64(),
        preconditions,
        warnings,
        divergence,
    })
}

/// Per-round wall-clock times of a run with the given executor, for speedup
/// measurements. Returns `(mean time per outer iteration, counters)`.
pub fn time_iterations(
    config: &SamplerConfig,
    potential: &dyn Potential,
    executor: &Executor,
    iterations: u64,
) -> Result<(Duration, CounterSnapshot)> {
    let mut chain = Chain::new(config, potential, 0)?;
    let start = Instant::now();
    chain.advance(executor, iterations)?;
    let elapsed = start.elapsed();
    Ok((elapsed / iterations.max(1) as u32, chain.counters()))
}

/// Outcome of [`run_ensemble`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub chains: u64,
    pub iterations_completed: u64,
    /// Summed over chains.
    pub counters: CounterSnapshot,
    /// Counters of a single chain (all chains do identical work).
    pub per_chain: CounterSnapshot,
    pub wall_time: f64,
    pub preconditions: PreconditionReport,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence: Option<DivergenceInfo>,
}

/// What [`run_ensemble`] shows its observer at each recorded iteration.
#[derive(Debug)]
pub struct EnsembleProgress<'a> {
    pub iteration: u64,
    /// In chain order.
    pub states: &'a [ChainState],
    pub per_chain: CounterSnapshot,
    pub elapsed: Duration,
}

/// Runs `chains` independent chains in lockstep blocks of `record_every`
/// iterations and hands the states to `observe` at iteration 0, after every
/// block, and at the end. Chains advance in parallel when the `parallel`
/// feature is on; states are always presented in chain order.
pub fn run_ensemble<F>(
    config: &SamplerConfig,
    potential: &dyn Potential,
    chains: u64,
    record_every: u64,
    mut observe: F,
) -> Result<EnsembleSummary>
where
    F: FnMut(&EnsembleProgress<'_>) -> Result<()>,
{
    if record_every == 0 {
        return Err(Error::config("record_every must be positive"));
    }
    if chains == 0 {
        return Err(Error::config("ensemble size must be positive"));
    }
    config.validate_for(potential)?;
    let (preconditions, warnings) = precondition_warnings(config, potential)?;
    let init = Initializer::new(config, potential)?;
    let mut pool: Vec<Chain<'_>> = (0..chains)
        .map(|c| Chain::from_state(config, potential, c, init.state(config, potential, c), EvalCounter::new()))
        .collect();
    let start = Instant::now();
    let mut states: Vec<ChainState> = pool.iter().map(|c| c.state.clone()).collect();
    let mut report = |pool: &[Chain<'_>], states: &mut Vec<ChainState>, iteration: u64| {
        for (slot, chain) in states.iter_mut().zip(pool) {
            slot.clone_from(&chain.state);
        }
        observe(&EnsembleProgress {
            iteration,
            states,
            per_chain: pool[0].counters(),
            elapsed: start.elapsed(),
        })
    };
    report(&pool, &mut states, 0)?;

    let mut done = 0;
    let mut divergence = None;
    while done < config.iterations {
        let steps = record_every.min(config.iterations - done);
        let results = advance_all(&mut pool, steps);
        if let Some((c, e)) = results.into_iter().enumerate().find_map(|(c, r)| r.err().map(|e| (c, e))) {
            match e {
                Error::Divergence { iteration, norm } => {
                    divergence = Some(DivergenceInfo {
                        iteration,
                        norm,
                        message: format!("chain {c} diverged at iteration {iteration} (|theta| = {norm:e})"),
                    });
                    break;
                }
                other => return Err(other),
            }
        }
        done += steps;
        report(&pool, &mut states, done)?;
    }
    let counters = pool
        .iter()
        .map(|c| c.counters())
        .fold(CounterSnapshot::default(), |a, b| a + b);
    Ok(EnsembleSummary {
        chains,
        iterations_completed: done,
        counters,
        per_chain: pool[0].counters(),
        wall_time: start.elapsed().as_secs_f64(),
        preconditions,
        warnings,
        divergence,
    })
}

#[cfg(feature = "parallel")]
fn advance_all(pool: &mut [Chain<'_>], steps: u64) -> Vec<Result<()>> {
    use rayon::prelude::*;
    pool.par_iter_mut()
        .map(|c| c.advance(&Executor::Inline, steps))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn advance_all(pool: &mut [Chain<'_>], steps: u64) -> Vec<Result<()>> {
    pool.iter_mut().map(|c| c.advance(&Executor::Inline, steps)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::QuadraticPotential;

    fn scalar(a: f64) -> QuadraticPotential {
        QuadraticPotential::diagonal(&[a], None).unwrap()
    }

    fn fixed_u(values: &[f64]) -> MidpointDraw {
        MidpointDraw::from_values(values.to_vec()).unwrap()
    }

    #[test]
    fn lmc_noiseless_examples() {
        let target = scalar(1.0);
        let counter = EvalCounter::new();
        let oracle = GradientOracle::new(&target, &counter);
        let config = SamplerConfig::new(SamplerKind::Lmc, 0.1);
        let draw = StepDraw::noiseless(&config, 1, fixed_u(&[0.5])).unwrap();
        let mut state = ChainState::new(vec![1.0], None);
        lmc_step(&config, &oracle, &mut state, 0, Some(&draw)).unwrap();
        assert_eq!(state.theta, vec![0.9]);
        let mut at_min = ChainState::new(vec![0.0], None);
        lmc_step(&config, &oracle, &mut at_min, 0, Some(&draw)).unwrap();
        assert_eq!(at_min.theta, vec![0.0]);
        assert_eq!(counter.snapshot().gradient_evals, 2);
    }

    #[test]
    fn prlmc_noiseless_matches_scalar_polynomial() {
        // f = a θ²/2, zero noise, U fixed: each inner round is affine in θ_k.
        let a = 3.0;
        let h = 0.07;
        let u = [0.2, 0.4, 0.9];
        let target = scalar(a);
        let counter = EvalCounter::new();
        let oracle = GradientOracle::new(&target, &counter);
        for q in 1..=4 {
            let config = SamplerConfig::new(SamplerKind::Prlmc, h).with_points(3).with_inner_steps(q);
            let draw = StepDraw::noiseless(&config, 1, fixed_u(&u)).unwrap();
            let mut state = ChainState::new(vec![1.5], None);
            prlmc_step(&config, &oracle, &mut state, 0, Some(&draw)).unwrap();

            let theta = 1.5;
            let mut pts = [theta; 3];
            for _ in 1..q {
                let g = pts.map(|x| a * x);
                let mut next = [0.0; 3];
                for r in 0..3 {
                    let mut s = 0.0;
                    for j in 0..=r {
                        let coeff = (1.0f64 / 3.0).min(u[r] - j as f64 / 3.0);
                        s += coeff * g[j];
                    }
                    next[r] = theta - h * s;
                }
                pts = next;
            }
            let expected = theta - h / 3.0 * pts.iter().map(|x| a * x).sum::<f64>();
            assert!((state.theta[0] - expected).abs() < 1e-14, "Q={q}");
        }
    }

    #[test]
    fn prklmc_noiseless_matches_scalar_reference() {
        let (a, h, gamma) = (2.0, 0.05, 4.0);
        let u = [0.3, 0.8];
        let target = scalar(a);
        let counter = EvalCounter::new();
        let oracle = GradientOracle::new(&target, &counter);
        let config = SamplerConfig::new(SamplerKind::Prklmc, h)
            .with_points(2)
            .with_inner_steps(3)
            .with_friction(gamma);
        let draw = StepDraw::noiseless(&config, 1, fixed_u(&u)).unwrap();
        let (theta, v) = (0.7, -0.4);
        let mut state = ChainState::new(vec![theta], Some(vec![v]));
        prklmc_step(&config, &oracle, &mut state, 0, Some(&draw)).unwrap();

        // Reference with coefficients from their defining integrals
        // (closed forms of elementary exponentials).
        let b = |ur: f64, j: usize| {
            let lo = (j as f64 - 1.0) * h / 2.0;
            let hi = (h / 2.0) * (j as f64).min(2.0 * ur);
            let t = ur * h;
            // ∫ (1 - e^{-γ(t - s)}) ds
            (hi - lo) - ((-gamma * (t - hi)).exp() - (-gamma * (t - lo)).exp()) / gamma
        };
        let mut pts = [theta; 2];
        for _ in 1..3 {
            let g = pts.map(|x| a * x);
            let mut next = [0.0; 2];
            for r in 0..2 {
                let ar = (1.0 - (-gamma * h * u[r]).exp()) / gamma;
                let s: f64 = (0..=r).map(|j| b(u[r], j + 1) * g[j]).sum();
                next[r] = theta + ar * v - s;
            }
            pts = next;
        }
        let g = pts.map(|x| a * x);
        let theta1 = theta + (1.0 - (-gamma * h).exp()) / gamma * v
            - (0..2)
                .map(|r| h / 2.0 * (1.0 - (-gamma * h * (1.0 - u[r])).exp()) * g[r])
                .sum::<f64>();
        let v1 = (-gamma * h).exp() * v
            - gamma * (0..2).map(|r| h / 2.0 * (-gamma * h * (1.0 - u[r])).exp() * g[r]).sum::<f64>();
        assert!((state.theta[0] - theta1).abs() < 1e-14);
        assert!((state.velocity.as_ref().unwrap()[0] - v1).abs() < 1e-14);
    }

    #[test]
    fn free_transport_limit() {
        let target = QuadraticPotential::diagonal(&[1e-12], None).unwrap();
        let counter = EvalCounter::new();
        let oracle = GradientOracle::new(&target, &counter);
        let (h, gamma) = (1e-3, 1e-3);
        let config = SamplerConfig::new(SamplerKind::Rklmc, h).with_friction(gamma);
        let draw = StepDraw::noiseless(&config, 1, fixed_u(&[0.5])).unwrap();
        let mut state = ChainState::new(vec![1.0], Some(vec![2.0]));
        rklmc_step(&config, &oracle, &mut state, 0, Some(&draw)).unwrap();
        assert!((state.theta[0] - (1.0 + h * 2.0)).abs() < 1e-8);
    }

    #[test]
    fn counters_follow_shape() {
        let target = QuadraticPotential::standard(2).unwrap();
        let config = SamplerConfig::new(SamplerKind::Prlmc, 0.05)
            .with_points(4)
            .with_inner_steps(3)
            .with_iterations(10);
        let trace = run(&config, &target, 3).unwrap();
        assert_eq!(trace.counters.gradient_evals, 120);
        assert_eq!(trace.counters.sequential_rounds, 30);
        assert_eq!(trace.snapshots.len(), 1 + 4);

        let lmc = SamplerConfig::new(SamplerKind::Lmc, 0.05).with_iterations(10);
        let trace = run(&lmc, &target, 1).unwrap();
        assert_eq!(trace.counters.gradient_evals, 10);
        assert_eq!(trace.counters.sequential_rounds, 10);

        let limited = config.clone().with_parallel_width(ParallelWidth::Limited(3));
        let trace = run(&limited, &target, 10).unwrap();
        assert_eq!(trace.counters.gradient_evals, 120);
        assert_eq!(trace.counters.sequential_rounds, 60);
    }

    #[test]
    fn zero_iterations_keep_only_initial_snapshot() {
        let target = QuadraticPotential::diagonal(&[1.0, 2.0], Some(vec![1.0, -1.0])).unwrap();
        let config = SamplerConfig::new(SamplerKind::Prlmc, 0.05);
        let trace = run(&config, &target, 1).unwrap();
        assert_eq!(trace.snapshots.len(), 1);
        assert_eq!(trace.snapshots[0].theta, vec![1.0, -1.0]);
        assert_eq!(trace.counters, CounterSnapshot::default());
    }

    #[test]
    fn invalid_configs_rejected() {
        let target = QuadraticPotential::standard(1).unwrap();
        let bad = [
            SamplerConfig::new(SamplerKind::Prlmc, 0.1).with_points(0),
            SamplerConfig::new(SamplerKind::Prlmc, 0.1).with_inner_steps(0),
            SamplerConfig::new(SamplerKind::Prlmc, -0.1),
            SamplerConfig::new(SamplerKind::Prklmc, 0.1),
            SamplerConfig::new(SamplerKind::Lmc, 0.1).with_friction(1.0),
            SamplerConfig::new(SamplerKind::Lmc, 0.1).with_initial_point(InitialPoint::Fixed(vec![0.0, 1.0])),
        ];
        for config in bad {
            assert!(matches!(run(&config, &target, 1), Err(Error::Config(_))), "{config:?}");
        }
    }

    #[test]
    fn divergence_returns_partial_trace() {
        let target = scalar(1.0);
        let config = SamplerConfig::new(SamplerKind::Lmc, 3.5)
            .with_iterations(10_000)
            .with_initial_point(InitialPoint::Fixed(vec![1.0]));
        let trace = run(&config, &target, 100).unwrap();
        let d = trace.divergence.as_ref().expect("unstable step must diverge");
        assert!(d.iteration < 10_000);
        assert!(trace.check().is_err());
        assert!(!trace.preconditions.holds);
        assert!(!trace.warnings.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_seed_sensitive() {
        let target = QuadraticPotential::diagonal(&[1.0, 5.0], None).unwrap();
        let config = SamplerConfig::new(SamplerKind::Prklmc, 0.01)
            .with_points(3)
            .with_inner_steps(2)
            .with_friction(25.0)
            .with_iterations(40)
            .with_seed(9);
        let a = run(&config, &target, 7).unwrap();
        let b = run(&config, &target, 7).unwrap();
        assert_eq!(a.snapshots.iter().map(|s| &s.theta).collect::<Vec<_>>(),
                   b.snapshots.iter().map(|s| &s.theta).collect::<Vec<_>>());
        let c = run(&config.clone().with_seed(10), &target, 7).unwrap();
        assert_ne!(a.final_state().unwrap().theta, c.final_state().unwrap().theta);
    }

    #[test]
    fn ensemble_chain_zero_matches_single_run() {
        let target = QuadraticPotential::diagonal(&[1.0, 2.0], None).unwrap();
        let config = SamplerConfig::new(SamplerKind::Prlmc, 0.02)
            .with_points(2)
            .with_inner_steps(2)
            .with_iterations(25)
            .with_seed(4)
            .with_initial_point(InitialPoint::Target);
        let single = run(&config, &target, 25).unwrap();
        let mut last = Vec::new();
        let summary = run_ensemble(&config, &target, 5, 10, |progress| {
            if progress.iteration == 25 {
                last = progress.states.to_vec();
                assert_eq!(progress.per_chain.gradient_evals, 25 * 4);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(last.len(), 5);
        assert_eq!(last[0].theta, single.final_state().unwrap().theta);
        assert_eq!(summary.counters.gradient_evals, 5 * 25 * 4);
        assert_eq!(summary.per_chain.sequential_rounds, 25 * 2);
    }

    #[test]
    fn step_override_checks_shape() {
        let target = scalar(1.0);
        let counter = EvalCounter::new();
        let oracle = GradientOracle::new(&target, &counter);
        let config = SamplerConfig::new(SamplerKind::Prlmc, 0.1).with_points(2);
        let wrong = StepDraw::noiseless(&SamplerConfig::new(SamplerKind::Lmc, 0.1), 1, fixed_u(&[0.5])).unwrap();
        let mut state = ChainState::new(vec![0.0], None);
        assert!(prlmc_step(&config, &oracle, &mut state, 0, Some(&wrong)).is_err());
        assert!(lmc_step(&config, &oracle, &mut state, 0, None).is_err());
    }
}
