//! Checks against values frozen from `tests/oracle/reference_values.py`
//! (50-digit brute-force enumeration, independent of this crate), plus
//! property tests over random instances.

#![allow(clippy::excessive_precision)]

use std::collections::HashMap;

use pgverify::estimate::{mc_gradient, paired_variance, prop1_sampled, EstimatorKind};
use pgverify::exact::{
    cross_term, exact_gradient_fullreturn, exact_gradient_prefix, exact_gradient_q,
    finite_diff_gradient, objective, prefix_mass, q_values, suffix_expectation, trajectory_mass,
};
use pgverify::instance::{bandit, random_instance, GenSpec};
use pgverify::mdp::{
    enumerate_prefixes, enumerate_trajectories, prefix_density, reward_to_go, sample_trajectory,
    trajectory_density, trajectory_return,
};
use pgverify::policy::{GradientVector, SoftmaxPolicy};
use pgverify::rng::substream;
use pgverify::stats::Status;
use pgverify::{Mdp, Prefix, Trajectory};
use proptest::prelude::*;

fn reference_mdp(horizon: usize) -> Mdp {
    Mdp::new(
        2,
        2,
        horizon,
        vec![0.6, 0.4],
        vec![0.7, 0.3, 0.1, 0.9, 0.5, 0.5, 1.0, 0.0],
        vec![1.5, -2.0, 0.5, 3.0],
    )
    .unwrap()
}

fn reference_policy() -> SoftmaxPolicy {
    SoftmaxPolicy::new(2, 2, vec![0.3, -0.8, 1.1, 0.4]).unwrap()
}

const REF_J: f64 = 2.7267738601141772016;
const REF_GRAD: [f64; 4] = [
    1.0869022761286025902,
    -1.0869022761286025902,
    -0.60977425707877134232,
    0.60977425707877134232,
];

#[test]
fn densities_match_reference() {
    let policy = reference_policy();
    let mdp = reference_mdp(3);
    let traj = Trajectory::new(&mdp, vec![0, 1, 1], vec![1, 0, 1]).unwrap();
    let d = trajectory_density(&mdp, &policy, &traj).unwrap();
    assert!((d - 0.014950048382394513614).abs() <= 1e-15, "{d}");

    let short = reference_mdp(2);
    let traj = Trajectory::new(&short, vec![1, 0], vec![0, 1]).unwrap();
    let d = trajectory_density(&short, &policy, &traj).unwrap();
    assert!((d - 0.03337462873278228393).abs() <= 1e-15, "{d}");
}

#[test]
fn objective_and_gradient_match_reference() {
    let mdp = reference_mdp(3);
    let policy = reference_policy();
    assert!((objective(&mdp, &policy).unwrap() - REF_J).abs() <= 1e-12);
    let reference = GradientVector(REF_GRAD.to_vec());
    for g in [
        exact_gradient_prefix(&mdp, &policy).unwrap(),
        exact_gradient_fullreturn(&mdp, &policy).unwrap(),
        exact_gradient_q(&mdp, &policy).unwrap(),
    ] {
        assert!(g.max_abs_diff(&reference) <= 1e-12, "{g:?}");
    }
    let fd = finite_diff_gradient(&mdp, &policy, 1e-4).unwrap();
    assert!(fd.max_abs_diff(&reference) <= 1e-6);
}

#[test]
fn q_table_matches_reference() {
    let mdp = reference_mdp(3);
    let policy = reference_policy();
    let expected: [[[f64; 2]; 2]; 3] = [
        [
            [3.2549928577156617719, 0.12829853347936133244],
            [2.3794280829702282921, 4.5683400198338119916],
        ],
        [
            [2.3369964295819135504, -0.74083145042008257822],
            [1.4777204695812481742, 3.6259103695829116147],
        ],
        [[1.5, -2.0], [0.5, 3.0]],
    ];
    let (q, _) = q_values(&mdp, &policy).unwrap();
    for t in 1..=3 {
        for (s, row) in expected[t - 1].iter().enumerate() {
            for (a, &want) in row.iter().enumerate() {
                assert!((q.get(t, s, a) - want).abs() <= 1e-12);
                assert!(
                    (suffix_expectation(&mdp, &policy, t, s, a).unwrap() - want).abs() <= 1e-12
                );
            }
        }
    }
}

#[test]
fn bandit_closed_forms() {
    // J = Σ_a π_a r_a = 0.5, dJ/dθ_a = π_a (r_a - J) = ±0.25
    let (mdp, policy) = bandit();
    assert_eq!(objective(&mdp, &policy).unwrap(), 0.5);
    let target = GradientVector(vec![0.25, -0.25]);
    assert!(
        exact_gradient_prefix(&mdp, &policy)
            .unwrap()
            .max_abs_diff(&target)
            <= 1e-15
    );
    assert!(
        finite_diff_gradient(&mdp, &policy, 1e-4)
            .unwrap()
            .max_abs_diff(&target)
            <= 1e-7
    );
    let est = mc_gradient(&mdp, &policy, EstimatorKind::FullReturn, 100_000, 77).unwrap();
    assert_eq!(est.status_against(&target), Status::Pass);
}

#[test]
fn sampled_frequencies_match_densities() {
    let mdp = reference_mdp(2);
    let policy = reference_policy();
    let n = 100_000u64;
    let mut counts: HashMap<Trajectory, u64> = HashMap::new();
    for k in 0..n {
        *counts
            .entry(sample_trajectory(&mdp, &policy, &mut substream(123, k)))
            .or_default() += 1;
    }
    for traj in enumerate_trajectories(&mdp).unwrap() {
        let p = trajectory_density(&mdp, &policy, &traj).unwrap();
        let observed = *counts.get(&traj).unwrap_or(&0) as f64 / n as f64;
        if p == 0.0 {
            assert_eq!(observed, 0.0);
            continue;
        }
        let stderr = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (observed - p).abs() <= 4.0 * stderr,
            "{traj:?}: {observed} vs {p}"
        );
    }
}

#[test]
fn prefix_normalization_and_length_one() {
    let mdp = reference_mdp(3);
    let policy = reference_policy();
    for t in 1..=3 {
        let total: f64 = enumerate_prefixes(&mdp, t)
            .unwrap()
            .map(|p| prefix_density(&mdp, &policy, &p).unwrap())
            .sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
    // initial_dist[1] · π(0|1) = 0.4 · e^1.1 / (e^1.1 + e^0.4)
    let p = Prefix::new(&mdp, vec![1], vec![0]).unwrap();
    let hand = 0.4 * 1.1f64.exp() / (1.1f64.exp() + 0.4f64.exp());
    assert!((prefix_density(&mdp, &policy, &p).unwrap() - hand).abs() <= 1e-15);
}

#[test]
fn sampled_cross_term_stderr_scales_with_n() {
    let mdp = reference_mdp(3);
    let policy = reference_policy();
    let small = prop1_sampled(&mdp, &policy, 3, 1, 50_000, 8).unwrap();
    let large = prop1_sampled(&mdp, &policy, 3, 1, 100_000, 8).unwrap();
    for (a, b) in small.stderr.iter().zip(&large.stderr) {
        let ratio = b / a;
        assert!(
            (ratio - 0.5f64.sqrt()).abs() <= 0.2 * 0.5f64.sqrt(),
            "{ratio}"
        );
    }
}

#[test]
fn near_deterministic_policy_cross_term() {
    let mdp = reference_mdp(3);
    let policy = SoftmaxPolicy::new(2, 2, vec![20.0, -20.0, -20.0, 20.0]).unwrap();
    let est = prop1_sampled(&mdp, &policy, 2, 1, 100_000, 3).unwrap();
    assert_eq!(est.status_against(&GradientVector::zeros(4)), Status::Pass);
    assert!(cross_term(&mdp, &policy, 2, 1).unwrap().max_abs() <= 1e-12);
}

#[test]
fn paired_estimates_are_unbiased() {
    let mdp = reference_mdp(3);
    let policy = reference_policy();
    let exact = GradientVector(REF_GRAD.to_vec());
    let report = paired_variance("ref", &mdp, &policy, &EstimatorKind::ALL, 100_000, 21).unwrap();
    for est in &report.estimates {
        assert_ne!(
            est.status_against(&exact),
            Status::Fail,
            "{:?}",
            est.estimator
        );
    }
}

fn small_instance() -> impl Strategy<Value = (Mdp, SoftmaxPolicy)> {
    (
        1usize..=3,
        1usize..=3,
        1usize..=3,
        0.0f64..10.0,
        any::<u64>(),
    )
        .prop_map(|(s, a, t, scale, seed)| {
            random_instance(&GenSpec {
                num_states: s,
                num_actions: a,
                horizon: t,
                reward_scale: scale,
                seed,
            })
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn enumeration_is_normalized((mdp, policy) in small_instance()) {
        prop_assert!((trajectory_mass(&mdp, &policy).unwrap() - 1.0).abs() <= 1e-12);
        for t in 1..=mdp.horizon() {
            prop_assert!((prefix_mass(&mdp, &policy, t).unwrap() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_routes_agree((mdp, policy) in small_instance()) {
        let prefix = exact_gradient_prefix(&mdp, &policy).unwrap();
        let scale = prefix.max_abs().max(1.0);
        prop_assert!(prefix.max_abs_diff(&exact_gradient_fullreturn(&mdp, &policy).unwrap()) <= 1e-10 * scale);
        prop_assert!(prefix.max_abs_diff(&exact_gradient_q(&mdp, &policy).unwrap()) <= 1e-10 * scale);
        for j in 1..=mdp.horizon() {
            for t in 1..j {
                prop_assert!(cross_term(&mdp, &policy, j, t).unwrap().max_abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reward_to_go_recursion((mdp, policy) in small_instance(), seed in any::<u64>()) {
        let traj = sample_trajectory(&mdp, &policy, &mut substream(seed, 0));
        let horizon = mdp.horizon();
        prop_assert_eq!(reward_to_go(&mdp, &traj, 1).unwrap(), trajectory_return(&mdp, &traj));
        for j in 1..horizon {
            let lhs = reward_to_go(&mdp, &traj, j).unwrap();
            let rhs = mdp.reward(traj.states()[j - 1], traj.actions()[j - 1]) + reward_to_go(&mdp, &traj, j + 1).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn prefix_score_telescopes((mdp, policy) in small_instance(), seed in any::<u64>()) {
        let traj = sample_trajectory(&mdp, &policy, &mut substream(seed, 1));
        let first = traj.prefix(1).unwrap();
        prop_assert_eq!(policy.prefix_score(&first), policy.score(traj.states()[0], traj.actions()[0]));
        for t in 2..=mdp.horizon() {
            let step = policy.prefix_score(&traj.prefix(t).unwrap()).sub(&policy.prefix_score(&traj.prefix(t - 1).unwrap()));
            prop_assert!(step.max_abs_diff(&policy.score(traj.states()[t - 1], traj.actions()[t - 1])) <= 1e-15);
        }
    }

    #[test]
    fn score_lives_in_its_row(logits in prop::collection::vec(-5.0f64..5.0, 6), s in 0usize..2, a in 0usize..3) {
        let policy = SoftmaxPolicy::new(2, 3, logits).unwrap();
        let g = policy.score(s, a);
        for k in 0..6 {
            if k / 3 != s {
                prop_assert_eq!(g[k], 0.0);
            }
        }
    }
}
