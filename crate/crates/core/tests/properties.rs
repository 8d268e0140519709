use parmid::experiment::{run_experiment, ExperimentConfig};
use parmid::metrics::{theorem1_bound, w2_to_target};
use parmid::parallel::ParallelWidth;
use parmid::potentials::{EvalCounter, GradientOracle, Potential, QuadraticPotential};
use parmid::samplers::{run, run_ensemble, step, ChainState, InitialPoint, SamplerConfig, SamplerKind};
use proptest::prelude::*;

fn norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two chains driven by the same noise; returns `-ln(|Δ_n| / |Δ_0|) / (m h n)`.
fn coupled_rate(config: &SamplerConfig, target: &QuadraticPotential, a0: Vec<f64>, b0: Vec<f64>, m: f64) -> f64 {
    let counter = EvalCounter::new();
    let oracle = GradientOracle::new(target, &counter);
    let velocity = config.kind.is_kinetic().then(|| vec![0.0; a0.len()]);
    let mut a = ChainState::new(a0, velocity.clone());
    let mut b = ChainState::new(b0, velocity);
    let start = norm(&a.theta, &b.theta);
    for _ in 0..config.iterations {
        step(config, &oracle, &mut a, 0, None).unwrap();
        step(config, &oracle, &mut b, 0, None).unwrap();
    }
    -(norm(&a.theta, &b.theta) / start).ln() / (m * config.step_size * config.iterations as f64)
}

#[test]
fn coupled_vanilla_chains_contract_at_rate_m() {
    let target = QuadraticPotential::diagonal(&[1.0, 4.0, 10.0], None).unwrap();
    for (r, q) in [(1, 1), (1, 2), (4, 3), (8, 2)] {
        let config = SamplerConfig::new(SamplerKind::Prlmc, 0.01)
            .with_points(r)
            .with_inner_steps(q)
            .with_iterations(300)
            .with_seed(9);
        let rate = coupled_rate(&config, &target, vec![0.0; 3], vec![1.0, 0.0, 0.0], 1.0);
        assert!((0.9..=1.1).contains(&rate), "R={r} Q={q}: rate {rate}");
    }
}

#[test]
fn shared_noise_cancels_in_the_difference() {
    // On a quadratic the coupled difference follows the noiseless recursion.
    let target = QuadraticPotential::diagonal(&[2.0, 3.0], Some(vec![1.0, -1.0])).unwrap();
    let config = SamplerConfig::new(SamplerKind::Prlmc, 0.05)
        .with_points(2)
        .with_inner_steps(2)
        .with_iterations(1);
    let counter = EvalCounter::new();
    let oracle = GradientOracle::new(&target, &counter);
    let mut a = ChainState::new(vec![0.0, 0.0], None);
    let mut b = ChainState::new(vec![0.5, 0.0], None);
    step(&config, &oracle, &mut a, 4, None).unwrap();
    step(&config, &oracle, &mut b, 4, None).unwrap();
    assert_eq!(b.theta[1] - a.theta[1], 0.0);
    let shrink = (b.theta[0] - a.theta[0]) / 0.5;
    assert!(shrink > 1.0 - 2.0 * 0.05 - 1e-2 && shrink < 1.0 - 2.0 * 0.05 + 1e-2, "{shrink}");
}

#[test]
fn stationary_start_stays_within_discretization_error() {
    let diag = [1.0, 2.0, 5.0, 10.0];
    let target = QuadraticPotential::diagonal(&diag, Some(vec![0.5, -0.5, 1.0, 0.0])).unwrap();
    let gaussian = target.gaussian_target().unwrap();
    let h = 0.005;
    let config = SamplerConfig::new(SamplerKind::Prlmc, h)
        .with_points(4)
        .with_inner_steps(3)
        .with_iterations(100)
        .with_seed(21)
        .with_initial_point(InitialPoint::Target);
    let mut finals = Vec::new();
    run_ensemble(&config, &target, 10_000, 100, |progress| {
        if progress.iteration == 100 {
            finals = progress.states.iter().map(|s| s.theta.clone()).collect();
        }
        Ok(())
    })
    .unwrap();
    let est = w2_to_target(&finals, &gaussian, 30, 3).unwrap();
    let bound = theorem1_bound(h, 4, 3, target.spec(), 0.0, 100);
    assert!(
        est.value <= bound.discretization_term + 3.0 * est.std_error,
        "W2 {} ± {} vs {}",
        est.value,
        est.std_error,
        bound.discretization_term
    );
}

#[test]
fn experiment_rows_track_convergence_from_a_point_mass() {
    let config = ExperimentConfig::from_json(
        r#"{
            "potential": {"kind": "quadratic", "diagonal": [1.0, 2.0], "mean": [3.0, -3.0]},
            "sampler": {"kind": "prklmc", "step_size": 0.01, "points": 2, "inner_steps": 2,
                        "friction": 10.0, "iterations": 400, "initial_point": "zero"},
            "ensemble": 2000,
            "record_every": 100,
            "seed": 8
        }"#,
    )
    .unwrap();
    let report = run_experiment(&config).unwrap();
    let w2: Vec<f64> = report.rows.iter().map(|r| r.w2_target.unwrap()).collect();
    assert!(w2[0] > 4.0);
    assert!(w2.last().unwrap() < &(0.2 * w2[0]), "{w2:?}");
    for row in &report.rows {
        assert!(row.w2_target.unwrap() <= row.bound.unwrap(), "{row:?}");
    }
}

fn kind_strategy() -> impl Strategy<Value = SamplerKind> {
    prop::sample::select(SamplerKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn counters_follow_the_round_formula(
        kind in kind_strategy(),
        r in 1usize..7,
        q in 1usize..5,
        n in 0u64..12,
        width in 1usize..9,
    ) {
        let target = QuadraticPotential::standard(2).unwrap();
        let mut config = SamplerConfig::new(kind, 0.01)
            .with_points(r)
            .with_inner_steps(q)
            .with_iterations(n)
            .with_parallel_width(ParallelWidth::Limited(width));
        if kind.is_kinetic() {
            config = config.with_friction(2.0);
        }
        let (rr, qq) = config.shape();
        let trace = run(&config, &target, 5).unwrap();
        prop_assert_eq!(trace.counters.gradient_evals, n * (rr * qq) as u64);
        prop_assert_eq!(trace.counters.sequential_rounds, n * qq as u64 * rr.div_ceil(width) as u64);
        prop_assert_eq!(trace.snapshots.last().unwrap().iteration, n);
    }

    #[test]
    fn runs_are_deterministic_and_width_independent(
        kind in kind_strategy(),
        seed in any::<u64>(),
        width in 1usize..5,
    ) {
        let target = QuadraticPotential::diagonal(&[1.0, 3.0], Some(vec![0.2, -0.4])).unwrap();
        let mut config = SamplerConfig::new(kind, 0.02)
            .with_points(4)
            .with_inner_steps(2)
            .with_iterations(15)
            .with_seed(seed);
        if kind.is_kinetic() {
            config = config.with_friction(3.0);
        }
        let a = run(&config, &target, 5).unwrap();
        let b = run(&config.clone().with_parallel_width(ParallelWidth::Limited(width)), &target, 5).unwrap();
        let theta = |t: &parmid::samplers::RunTrace| t.snapshots.iter().map(|s| s.theta.clone()).collect::<Vec<_>>();
        prop_assert_eq!(theta(&a), theta(&b));
    }

    #[test]
    fn ensemble_chains_match_single_runs(seed in any::<u64>(), chain in 0u64..6) {
        let target = QuadraticPotential::diagonal(&[1.0, 2.0], None).unwrap();
        let config = SamplerConfig::new(SamplerKind::Prlmc, 0.02)
            .with_points(3)
            .with_iterations(7)
            .with_seed(seed);
        let mut last = Vec::new();
        run_ensemble(&config, &target, 6, 7, |p| {
            last = p.states.iter().map(|s| s.theta.clone()).collect();
            Ok(())
        })
        .unwrap();
        let mut chain_run = parmid::samplers::Chain::new(&config, &target, chain).unwrap();
        chain_run.advance(&parmid::parallel::Executor::Inline, 7).unwrap();
        prop_assert_eq!(&last[chain as usize], &chain_run.state().theta);
    }
}
