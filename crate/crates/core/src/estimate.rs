//! Monte Carlo policy-gradient estimators.
//!
//! Sample `k` of every run is drawn from [`crate::rng::substream`]`(seed, k)`,
//! so estimators evaluated with the same seed see the same trajectories
//! (common random numbers) and results do not depend on the worker count.
//! Samples are processed in fixed chunks of [`SAMPLE_CHUNK`]; chunk moments
//! are merged in chunk order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::exact::{q_values, QTable};
use crate::mdp::{rewards_to_go, sample_with_table, Mdp, Trajectory};
use crate::policy::{GradientVector, SoftmaxPolicy};
use crate::rng::substream;
use crate::stats::{z_score, Moments, Status};

pub const SAMPLE_CHUNK: u64 = 1024;

/// Default sample count for the sampled zero-expectation check.
pub const DEFAULT_PROP1_SAMPLES: u64 = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// Every score term multiplied by the total return.
    #[serde(rename = "full-return")]
    FullReturn,
    /// Score at step `j` multiplied by `R_j`.
    #[serde(rename = "reward-to-go")]
    RewardToGo,
    /// Score at step `j` multiplied by `Q_j(s_j, a_j)`.
    #[serde(rename = "q-weighted")]
    QWeighted,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [
        EstimatorKind::FullReturn,
        EstimatorKind::RewardToGo,
        EstimatorKind::QWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::FullReturn => "full-return",
            EstimatorKind::RewardToGo => "reward-to-go",
            EstimatorKind::QWeighted => "q-weighted",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| validation(format!("unknown estimator '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub mean: GradientVector,
    pub stderr: Vec<f64>,
    pub sample_count: u64,
    /// Sum of per-component sample variances of the single-sample vectors.
    pub covariance_trace: f64,
    /// `None` for quantities that are not gradient estimators, such as
    /// sampled cross terms.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorKind>,
    pub seed: u64,
}

impl GradEstimate {
    fn from_moments(m: &Moments, estimator: Option<EstimatorKind>, seed: u64) -> Self {
        Self {
            mean: GradientVector(m.mean().to_vec()),
            stderr: m.stderr(),
            sample_count: m.count(),
            covariance_trace: m.variance().iter().sum(),
            estimator,
            seed,
        }
    }

    /// Per-component `|mean - target| / stderr`.
    pub fn z_scores(&self, target: &GradientVector) -> Vec<f64> {
        self.mean
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .zip(&self.stderr)
            .map(|((m, t), se)| z_score(*m, *t, *se))
            .collect()
    }

    pub fn max_z(&self, target: &GradientVector) -> f64 {
        self.z_scores(target).into_iter().fold(0.0, f64::max)
    }

    /// Pass within 4 standard errors, warn up to 6, fail beyond.
    pub fn status_against(&self, target: &GradientVector) -> Status {
        Status::from_z(self.max_z(target))
    }
}

/// Paired comparison of estimators on one shared set of trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub instance_id: String,
    pub estimates: Vec<GradEstimate>,
    /// Reward-to-go trace over full-return trace; absent when either kind was
    /// not requested or the full-return trace is zero.
    pub ratio: Option<f64>,
    pub sample_count: u64,
    pub seed: u64,
}

impl VarianceReport {
    pub fn estimate(&self, kind: EstimatorKind) -> Option<&GradEstimate> {
        self.estimates.iter().find(|e| e.estimator == Some(kind))
    }

    pub fn trace(&self, kind: EstimatorKind) -> Option<f64> {
        self.estimate(kind).map(|e| e.covariance_trace)
    }
}

/// Adds one trajectory's estimator vector into `out`.
fn accumulate_sample(
    out: &mut [f64],
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    q: Option<&QTable>,
    traj: &Trajectory,
    kind: EstimatorKind,
) -> Result<()> {
    let (states, actions) = (traj.states(), traj.actions());
    match kind {
        EstimatorKind::FullReturn => {
            let mut total_score = vec![0.0; out.len()];
            for (&s, &a) in states.iter().zip(actions) {
                policy.accumulate_score(s, a, 1.0, &mut total_score);
            }
            let ret = rewards_to_go(mdp, traj)[0];
            for (o, g) in out.iter_mut().zip(total_score) {
                *o += g * ret;
            }
        }
        EstimatorKind::RewardToGo => {
            let to_go = rewards_to_go(mdp, traj);
            for ((&s, &a), r) in states.iter().zip(actions).zip(to_go) {
                policy.accumulate_score(s, a, r, out);
            }
        }
        EstimatorKind::QWeighted => {
            let q = q.ok_or(Error::MissingQTable)?;
            for (j, (&s, &a)) in states.iter().zip(actions).enumerate() {
                policy.accumulate_score(s, a, q.get(j + 1, s, a), out);
            }
        }
    }
    Ok(())
}

/// One-trajectory gradient estimate of the given kind.
pub fn single_sample_gradient(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    q: Option<&QTable>,
    traj: &Trajectory,
    kind: EstimatorKind,
) -> Result<GradientVector> {
    mdp.check_policy(policy)?;
    if traj.len() != mdp.horizon() {
        return Err(validation("trajectory length differs from horizon"));
    }
    let mut out = GradientVector::zeros(policy.num_params());
    accumulate_sample(&mut out.0, mdp, policy, q, traj, kind)?;
    Ok(out)
}

/// Samples `n` trajectories and feeds each to `eval`, which writes one vector
/// per output slot. Returns merged moments per slot.
fn sample_moments<F>(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    n: u64,
    seed: u64,
    slots: usize,
    eval: F,
) -> Result<Vec<Moments>>
where
    F: Fn(&Trajectory, &mut [Vec<f64>]) -> Result<()> + Sync,
{
    let len = policy.num_params();
    let probs = policy.prob_table();
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let partials: Vec<Result<Vec<Moments>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut moments = vec![Moments::new(len); slots];
            let mut buffers = vec![vec![0.0; len]; slots];
            for k in c * SAMPLE_CHUNK..((c + 1) * SAMPLE_CHUNK).min(n) {
                let traj = sample_with_table(mdp, &probs, &mut substream(seed, k));
                buffers
                    .iter_mut()
                    .for_each(|b| b.iter_mut().for_each(|x| *x = 0.0));
                eval(&traj, &mut buffers)?;
                for (m, b) in moments.iter_mut().zip(&buffers) {
                    m.push(b);
                }
            }
            Ok(moments)
        })
        .collect();
    let mut total = vec![Moments::new(len); slots];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part?) {
            t.merge(&p);
        }
    }
    Ok(total)
}

fn check_samples(n: u64) -> Result<()> {
    if n < 2 {
        return Err(validation(format!("need at least 2 samples, got {n}")));
    }
    Ok(())
}

/// Sample mean and standard error of one estimator over `n` trajectories.
pub fn mc_gradient(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    kind: EstimatorKind,
    n: u64,
    seed: u64,
) -> Result<GradEstimate> {
    check_samples(n)?;
    mdp.check_policy(policy)?;
    let q = match kind {
        EstimatorKind::QWeighted => Some(q_values(mdp, policy)?.0),
        _ => None,
    };
    let moments = sample_moments(mdp, policy, n, seed, 1, |traj, out| {
        accumulate_sample(&mut out[0], mdp, policy, q.as_ref(), traj, kind)
    })?;
    Ok(GradEstimate::from_moments(&moments[0], Some(kind), seed))
}

/// Evaluates every requested estimator on one shared set of `n` trajectories.
pub fn paired_variance(
    instance_id: &str,
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    kinds: &[EstimatorKind],
    n: u64,
    seed: u64,
) -> Result<VarianceReport> {
    check_samples(n)?;
    mdp.check_policy(policy)?;
    let kinds: Vec<EstimatorKind> = kinds
        .iter()
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if kinds.is_empty() {
        return Err(validation("no estimator kinds requested"));
    }
    let q = if kinds.contains(&EstimatorKind::QWeighted) {
        Some(q_values(mdp, policy)?.0)
    } else {
        None
    };
    let moments = sample_moments(mdp, policy, n, seed, kinds.len(), |traj, out| {
        for (buf, &kind) in out.iter_mut().zip(&kinds) {
            accumulate_sample(buf, mdp, policy, q.as_ref(), traj, kind)?;
        }
        Ok(())
    })?;
    let estimates: Vec<GradEstimate> = moments
        .iter()
        .zip(&kinds)
        .map(|(m, &k)| GradEstimate::from_moments(m, Some(k), seed))
        .collect();
    let traces: BTreeMap<EstimatorKind, f64> = estimates
        .iter()
        .filter_map(|e| e.estimator.map(|k| (k, e.covariance_trace)))
        .collect();
    let ratio = match (
        traces.get(&EstimatorKind::RewardToGo),
        traces.get(&EstimatorKind::FullReturn),
    ) {
        (Some(&rtg), Some(&full)) if full > 0.0 => Some(rtg / full),
        _ => None,
    };
    Ok(VarianceReport {
        instance_id: instance_id.to_string(),
        estimates,
        ratio,
        sample_count: n,
        seed,
    })
}

/// Sampled `E[∇log π(a_j|s_j) r_t]` for `t < j` (1-based), which should be zero.
pub fn prop1_sampled(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    j: usize,
    t: usize,
    n: u64,
    seed: u64,
) -> Result<GradEstimate> {
    check_samples(n)?;
    mdp.check_policy(policy)?;
    if !(1 <= t && t < j && j <= mdp.horizon()) {
        return Err(validation(format!(
            "need 1 <= t < j <= {}, got j={j}, t={t}",
            mdp.horizon()
        )));
    }
    let moments = sample_moments(mdp, policy, n, seed, 1, |traj, out| {
        let r = mdp.reward(traj.states()[t - 1], traj.actions()[t - 1]);
        policy.accumulate_score(traj.states()[j - 1], traj.actions()[j - 1], r, &mut out[0]);
        Ok(())
    })?;
    Ok(GradEstimate::from_moments(&moments[0], None, seed))
}
