mod support;

use crewforge::tester::{tune_with, Direction, TuningBudget, TuningDirective, TuningHint};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{grid_argmin, scalar_policy};

fn p_of(policy: &crewforge::policy::Policy) -> f64 {
    policy.param("p").unwrap().value
}

#[test]
fn quadratic_with_optimum_at_two() {
    let start = scalar_policy(0.0, 3.0, 0.0);
    let out = tune_with(&start, None, TuningBudget::default(), |p| (p_of(p) - 2.0).powi(2)).unwrap();
    let oracle = grid_argmin(0.0, 3.0, 0.001, |x| (x - 2.0).powi(2));
    assert!((oracle - 2.0).abs() < 1e-9);
    assert!((p_of(&out.policy) - 2.0).abs() <= 0.15, "{}", p_of(&out.policy));
}

#[test]
fn hundred_random_optima_are_found() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70e);
    let start = scalar_policy(0.0, 3.0, 0.0);
    for _ in 0..100 {
        let c: f64 = rng.random_range(0.0..=3.0);
        let j = |x: f64| (x - c).powi(2);
        let oracle = grid_argmin(0.0, 3.0, 0.001, j);
        assert!((oracle - c).abs() <= 0.0005 + 1e-12, "grid optimum {oracle} for c = {c}");
        let out = tune_with(&start, None, TuningBudget::default(), |p| j(p_of(p))).unwrap();
        let got = p_of(&out.policy);
        assert!((got - c).abs() <= 0.15 && (got - oracle).abs() <= 0.15, "c = {c}: got {got}");
    }
}

#[test]
fn hinted_direction_is_respected() {
    let start = scalar_policy(0.0, 3.0, 1.5);
    let down = TuningDirective {
        hints: vec![TuningHint {
            param_name: Some("p".into()),
            direction: Direction::Decrease,
            reason: "too fast".into(),
        }],
    };
    // the optimum lies upward, which the hint forbids
    let out = tune_with(&start, Some(&down), TuningBudget::default(), |p| (p_of(p) - 2.5).powi(2)).unwrap();
    assert_eq!(p_of(&out.policy), 1.5);
    assert_eq!(out.history.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn best_is_kept_and_params_stay_in_bounds(
        start in 0.0..=3.0f64,
        c in -1.0..4.0f64,
        noise_seed in any::<u64>(),
        rounds in 1usize..8,
        evals in 1usize..30,
    ) {
        let policy = scalar_policy(0.0, 3.0, start);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut calls = 0usize;
        let mut seen = Vec::new();
        let out = tune_with(&policy, None, TuningBudget { rounds, evals_per_round: evals }, |p| {
            calls += 1;
            let x = p_of(p);
            assert!((0.0..=3.0).contains(&x), "probe {x} out of bounds");
            let cost = (x - c).abs() + rng.random_range(0.0..0.01);
            seen.push(cost);
            cost
        })
        .unwrap();

        prop_assert_eq!(calls, out.evaluations);
        prop_assert!(calls <= rounds * evals);
        let best_seen = seen.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(out.best_objective(), best_seen);
        prop_assert!(out.best_objective() <= seen[0]);
        let objectives: Vec<f64> = out.history.iter().map(|h| h.objective).collect();
        prop_assert!(objectives.windows(2).all(|w| w[1] < w[0]));
    }
}
