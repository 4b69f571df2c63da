//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use pgverify::cli;
use pgverify::estimate::{mc_gradient, paired_variance, single_sample_gradient, EstimatorKind};
use pgverify::exact::{
    cross_term, exact_gradient_fullreturn, exact_gradient_prefix, exact_gradient_q,
    finite_diff_gradient, q_table_enumeration_gap, q_values,
};
use pgverify::instance::{bandit, chain_instance, random_instance, ChainSpec, GenSpec};
use pgverify::mdp::enumerate_trajectories;
use pgverify::stats::{FAIL_Z, PASS_Z};
use pgverify::train::{ascend, GradientSource, TrainConfig};
use pgverify::{Mdp, SoftmaxPolicy};

const ROUTE_TOL: f64 = 1e-10;
const EXACT_ZERO: f64 = 1e-12;
const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-6;
const DP_TOL: f64 = 1e-12;
const MONOTONE_SLACK: f64 = 1e-12;
const SUITE_SIZE: usize = 50;

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        summary: summary.into(),
    }
}

/// 50 random instances covering S, A in 1..=3, T in 1..=4 and reward scales 1, 5, 10.
fn suite() -> Vec<(GenSpec, Mdp, SoftmaxPolicy)> {
    (0..SUITE_SIZE)
        .map(|i| {
            let spec = GenSpec {
                num_states: 1 + i % 3,
                num_actions: 1 + (i / 3) % 3,
                horizon: 1 + (i / 9) % 4,
                reward_scale: [1.0, 5.0, 10.0][i % 3],
                seed: 1000 + i as u64,
            };
            let (mdp, policy) = random_instance(&spec).expect("generator yields valid instances");
            (spec, mdp, policy)
        })
        .collect()
}

fn route_equality(suite: &[(GenSpec, Mdp, SoftmaxPolicy)]) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (_, mdp, policy) in suite {
        let prefix = exact_gradient_prefix(mdp, policy).unwrap();
        let scale = prefix.max_abs().max(1.0);
        let full = exact_gradient_fullreturn(mdp, policy).unwrap();
        let q = exact_gradient_q(mdp, policy).unwrap();
        worst = worst
            .max(prefix.max_abs_diff(&full) / scale)
            .max(prefix.max_abs_diff(&q) / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= ROUTE_TOL && secs < 60.0,
        format!("max relative gap {worst:.3e} (tol {ROUTE_TOL:e}), {secs:.2}s (limit 60s)"),
    )
}

fn past_cross_terms(suite: &[(GenSpec, Mdp, SoftmaxPolicy)]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for (_, mdp, policy) in suite {
        for j in 1..=mdp.horizon() {
            for t in 1..j {
                worst = worst.max(cross_term(mdp, policy, j, t).unwrap().max_abs());
                pairs += 1;
            }
        }
    }
    outcome(
        worst <= EXACT_ZERO,
        format!("{pairs} pairs with t < j, max |term| {worst:.3e} (tol {EXACT_ZERO:e})"),
    )
}

fn finite_differences(suite: &[(GenSpec, Mdp, SoftmaxPolicy)]) -> Outcome {
    let mut worst: f64 = 0.0;
    for (spec, mdp, policy) in suite {
        assert!(spec.reward_scale <= 10.0);
        let fd = finite_diff_gradient(mdp, policy, FD_STEP).unwrap();
        worst = worst.max(fd.max_abs_diff(&exact_gradient_prefix(mdp, policy).unwrap()));
    }
    outcome(
        worst <= FD_TOL,
        format!("max error {worst:.3e} (tol {FD_TOL:e}, step {FD_STEP:e})"),
    )
}

fn monte_carlo_unbiased() -> Outcome {
    let shapes = [(2, 2, 2), (2, 3, 3), (3, 2, 3), (3, 3, 2), (2, 2, 4)];
    let mut worst: f64 = 0.0;
    let mut components = 0;
    for (i, (s, a, t)) in shapes.into_iter().enumerate() {
        let spec = GenSpec {
            num_states: s,
            num_actions: a,
            horizon: t,
            reward_scale: 5.0,
            seed: 500 + i as u64,
        };
        let (mdp, policy) = random_instance(&spec).unwrap();
        let exact = exact_gradient_prefix(&mdp, &policy).unwrap();
        for kind in EstimatorKind::ALL {
            let est = mc_gradient(&mdp, &policy, kind, 100_000, 9000 + i as u64).unwrap();
            worst = worst.max(est.max_z(&exact));
            components += exact.len();
        }
    }
    outcome(
        worst <= PASS_Z,
        format!(
            "{components} components, max |z| {worst:.3} (pass <= {PASS_Z}, hard fail > {FAIL_Z})"
        ),
    )
}

fn horizon_one(suite: &[(GenSpec, Mdp, SoftmaxPolicy)]) -> Outcome {
    let mut identical = true;
    let mut ratios_exact = true;
    let mut count = 0;
    for (_, mdp, policy) in suite.iter().filter(|(_, m, _)| m.horizon() == 1) {
        count += 1;
        for traj in enumerate_trajectories(mdp).unwrap() {
            let f = single_sample_gradient(mdp, policy, None, &traj, EstimatorKind::FullReturn)
                .unwrap();
            let r = single_sample_gradient(mdp, policy, None, &traj, EstimatorKind::RewardToGo)
                .unwrap();
            identical &=
                f.0.iter()
                    .zip(&r.0)
                    .all(|(x, y)| x.to_bits() == y.to_bits());
        }
        let report = paired_variance("t1", mdp, policy, &EstimatorKind::ALL, 2000, 5).unwrap();
        // a zero full-return trace (e.g. one action) leaves the ratio undefined
        if let Some(ratio) = report.ratio {
            ratios_exact &= ratio == 1.0;
        } else {
            ratios_exact &=
                report.trace(EstimatorKind::FullReturn) == report.trace(EstimatorKind::RewardToGo);
        }
    }
    let (bandit_mdp, bandit_policy) = bandit();
    let bandit_report = paired_variance(
        "bandit",
        &bandit_mdp,
        &bandit_policy,
        &EstimatorKind::ALL,
        2000,
        5,
    )
    .unwrap();
    ratios_exact &= bandit_report.ratio == Some(1.0);
    outcome(
        identical && ratios_exact,
        format!("{count} T=1 suite instances + bandit: bitwise identical {identical}, ratios exactly 1.0 {ratios_exact}"),
    )
}

fn variance_observation() -> Outcome {
    let reports: Vec<_> = (0..20)
        .map(|i| {
            let (mdp, policy) = chain_instance(&ChainSpec {
                num_states: 4,
                horizon: 5,
                seed: 700 + i,
            })
            .unwrap();
            paired_variance(
                &format!("chain-{i:03}"),
                &mdp,
                &policy,
                &EstimatorKind::ALL,
                10_000,
                31,
            )
            .unwrap()
        })
        .collect();
    for r in &reports {
        println!(
            "    {} ratio {:.4}",
            r.instance_id,
            r.ratio.unwrap_or(f64::NAN)
        );
    }
    let median = cli::median_ratio(&reports).unwrap_or(f64::NAN);
    outcome(
        median < 1.0,
        format!("median reward-to-go/full-return trace ratio {median:.4} (< 1 required)"),
    )
}

fn dp_consistency(suite: &[(GenSpec, Mdp, SoftmaxPolicy)]) -> Outcome {
    let mut worst: f64 = 0.0;
    for (_, mdp, policy) in suite {
        let (q, _) = q_values(mdp, policy).unwrap();
        worst = worst.max(q_table_enumeration_gap(mdp, policy, &q).unwrap());
    }
    outcome(
        worst <= DP_TOL,
        format!("max |Q - enumerated| {worst:.3e} (tol {DP_TOL:e})"),
    )
}

fn training(suite: &[(GenSpec, Mdp, SoftmaxPolicy)]) -> Outcome {
    let (mdp, policy) = bandit();
    let config = |steps, lr| TrainConfig {
        steps,
        learning_rate: lr,
        batch_size: 1,
        estimator: GradientSource::Exact,
        seed: 0,
        snapshot_every: 0,
    };
    let bandit_j = ascend(&mdp, &policy, &config(50, 0.5))
        .unwrap()
        .final_objective();
    let mut worst_drop: f64 = f64::NEG_INFINITY;
    for (_, mdp, policy) in suite {
        let history = ascend(mdp, policy, &config(20, 1e-2)).unwrap();
        for w in history.records.windows(2) {
            worst_drop = worst_drop.max(w[0].j_exact - w[1].j_exact);
        }
    }
    outcome(
        bandit_j >= 0.95 && worst_drop <= MONOTONE_SLACK,
        format!("bandit J after 50 steps {bandit_j:.4} (>= 0.95); largest per-step decrease at lr 1e-2 {worst_drop:.3e} (slack {MONOTONE_SLACK:e})"),
    )
}

fn reproducibility() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let commands: [(&str, Vec<&str>); 3] = [
        (
            "verify",
            vec!["verify", "--gen", "3,2,3,5", "--seed", "12", "--n", "20000"],
        ),
        (
            "variance",
            vec![
                "variance", "--chain", "3,5", "--count", "4", "--n", "5000", "--seed", "12",
            ],
        ),
        (
            "train",
            vec![
                "train",
                "--gen",
                "2,2,3,2",
                "--seed",
                "12",
                "--estimator",
                "reward-to-go",
                "--steps",
                "20",
                "--lr",
                "0.1",
            ],
        ),
    ];
    let mut all_same = true;
    let mut notes = Vec::new();
    for (name, args) in commands {
        let mut outputs = Vec::new();
        for (run, workers) in ["1", "4", "4"].iter().enumerate() {
            let path = dir.path().join(format!("{name}-{run}.out"));
            let mut full = vec!["pgverify"];
            full.extend(args.iter().copied());
            full.extend(["--workers", workers, "--out", path.to_str().unwrap()]);
            let code = cli::run(full);
            outputs.push((code, read(&path)));
        }
        let same = outputs.windows(2).all(|w| w[0] == w[1]) && outputs[0].0 == cli::EXIT_OK;
        all_same &= same;
        notes.push(format!("{name}={same}"));
    }
    outcome(
        all_same,
        format!(
            "byte-identical across --workers 1/4 and reruns: {}",
            notes.join(", ")
        ),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn main() {
    let suite = suite();
    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        (
            "1 three-route gradient equality",
            Box::new(|| route_equality(&suite)),
        ),
        (
            "2 past-reward cross terms vanish (exact)",
            Box::new(|| past_cross_terms(&suite)),
        ),
        (
            "3 finite-difference oracle",
            Box::new(|| finite_differences(&suite)),
        ),
        ("4 Monte Carlo unbiasedness", Box::new(monte_carlo_unbiased)),
        ("5 T=1 degeneracy", Box::new(|| horizon_one(&suite))),
        ("6 variance observation", Box::new(variance_observation)),
        (
            "7 DP/enumeration consistency",
            Box::new(|| dp_consistency(&suite)),
        ),
        ("8 training demo", Box::new(|| training(&suite))),
        ("9 reproducibility", Box::new(reproducibility)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let result = check();
        println!(
            "[{}] {name}: {}",
            if result.pass { "PASS" } else { "FAIL" },
            result.summary
        );
        if !result.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
