//! Plain fixed-step gradient ascent, logging the exact objective each step.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::estimate::{mc_gradient, EstimatorKind};
use crate::exact::{exact_gradient_prefix, objective};
use crate::mdp::Mdp;
use crate::policy::{GradientVector, SoftmaxPolicy};
use crate::rng::mix_seed;

/// Where each ascent step gets its gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradientSource {
    Exact,
    Sampled(EstimatorKind),
}

impl std::str::FromStr for GradientSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "exact" {
            Ok(GradientSource::Exact)
        } else {
            s.parse().map(GradientSource::Sampled)
        }
    }
}

impl std::fmt::Display for GradientSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GradientSource::Exact => f.write_str("exact"),
            GradientSource::Sampled(kind) => kind.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: u64,
    pub estimator: GradientSource,
    pub seed: u64,
    /// Store the logits every this many steps (0 disables snapshots).
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(validation("steps must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(validation("learning rate must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(validation("batch size must be at least 1"));
        }
        if matches!(self.estimator, GradientSource::Sampled(_)) && self.batch_size < 2 {
            return Err(validation("sampled gradients need a batch of at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub j_exact: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// `steps + 1` records; record `k` holds `J(θ_k)` and the norm of the
    /// gradient evaluated at `θ_k`.
    pub records: Vec<TrainRecord>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_logits: Vec<f64>,
}

impl TrainHistory {
    pub fn final_objective(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.j_exact)
    }
}

fn gradient_at(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    config: &TrainConfig,
    step: usize,
) -> Result<GradientVector> {
    match config.estimator {
        GradientSource::Exact => exact_gradient_prefix(mdp, policy),
        GradientSource::Sampled(kind) => {
            let seed = mix_seed(config.seed, step as u64);
            Ok(mc_gradient(mdp, policy, kind, config.batch_size, seed)?.mean)
        }
    }
}

/// Runs `config.steps` ascent steps `θ ← θ + lr · ĝ` from `policy`.
pub fn ascend(mdp: &Mdp, policy: &SoftmaxPolicy, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    mdp.check_policy(policy)?;
    let mut theta = policy.clone();
    let mut records = Vec::with_capacity(config.steps + 1);
    let mut snapshots = Vec::new();
    for step in 0..=config.steps {
        let grad = gradient_at(mdp, &theta, config, step)?;
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
        records.push(TrainRecord {
            step,
            j_exact: objective(mdp, &theta)?,
            grad_norm: grad.norm(),
        });
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            snapshots.push((step, theta.logits().to_vec()));
        }
        if step < config.steps {
            theta.step(&grad, config.learning_rate);
        }
    }
    Ok(TrainHistory {
        records,
        snapshots,
        final_logits: theta.logits().to_vec(),
    })
}
