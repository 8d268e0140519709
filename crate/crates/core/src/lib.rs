//! Parallelized randomized-midpoint Langevin samplers.
//!
//! The crate implements the vanilla (pRLMC) and kinetic (pRKLMC) parallel
//! randomized-midpoint discretizations of the Langevin diffusion together with
//! their sequential baselines (LMC, RLMC, RKLMC). Around the samplers sit the
//! pieces needed to run and verify them:
//!
//! - [`potentials`]: gradient oracles for strongly log-concave targets, with
//!   exact evaluation accounting.
//! - [`noise`]: exact joint simulation of the correlated Gaussian increments
//!   each outer iteration needs.
//! - [`parallel`]: round-based gradient evaluation with ordered reduction.
//! - [`samplers`]: the shared inner-loop engine, single chains and ensembles.
//! - [`tuning`]: mixing-time parameter rules and precondition checks.
//! - [`metrics`]: closed-form W2 between Gaussians and the error bounds.
//! - [`experiment`]: JSON experiment configs and report emission.
//!
//! ```
//! use parmid::potentials::QuadraticPotential;
//! use parmid::samplers::{run, SamplerConfig, SamplerKind};
//!
//! let target = QuadraticPotential::diagonal(&[1.0, 4.0], None).unwrap();
//! let config = SamplerConfig::new(SamplerKind::Prlmc, 0.01)
//!     .with_points(4)
//!     .with_inner_steps(3)
//!     .with_iterations(50);
//! let trace = run(&config, &target, 10).unwrap();
//! assert_eq!(trace.counters.gradient_evals, 50 * 3 * 4);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod noise;
pub mod parallel;
pub mod potentials;
pub mod rng;
pub mod samplers;
pub mod tuning;

pub use error::{Error, Result};
