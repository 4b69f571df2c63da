//! Built-in and seeded random problem instances.
//!
//! The random family is fixed so a published `(shape, seed)` pair always
//! reproduces the same model: probability rows are normalized draws from
//! `(0, 1]`, rewards are uniform on `[-scale, scale]`, logits uniform on
//! `[-1, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::mdp::Mdp;
use crate::policy::SoftmaxPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub reward_scale: f64,
    pub seed: u64,
}

impl GenSpec {
    /// Parses `S,A,T,scale`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(validation(format!("expected S,A,T,scale, got '{text}'")));
        }
        let int = |s: &str, name: &str| {
            s.parse::<usize>()
                .map_err(|_| validation(format!("bad {name} '{s}'")))
        };
        let reward_scale: f64 = parts[3]
            .parse()
            .map_err(|_| validation(format!("bad reward scale '{}'", parts[3])))?;
        if !(reward_scale >= 0.0 && reward_scale.is_finite()) {
            return Err(validation("reward scale must be finite and non-negative"));
        }
        Ok(Self {
            num_states: int(parts[0], "S")?,
            num_actions: int(parts[1], "A")?,
            horizon: int(parts[2], "T")?,
            reward_scale,
            seed,
        })
    }
}

fn positive_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..len).map(|_| 1.0 - rng.gen::<f64>()).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn random_logits(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect()
}

/// Random model and policy from the fixed generator family.
pub fn random_instance(spec: &GenSpec) -> Result<(Mdp, SoftmaxPolicy)> {
    let (s, a) = (spec.num_states, spec.num_actions);
    if s == 0 || a == 0 || spec.horizon == 0 {
        return Err(validation("S, A and T must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let initial = positive_row(&mut rng, s);
    let transitions: Vec<f64> = (0..s * a).flat_map(|_| positive_row(&mut rng, s)).collect();
    let scale = spec.reward_scale;
    let rewards: Vec<f64> = (0..s * a)
        .map(|_| {
            if scale > 0.0 {
                rng.gen_range(-scale..=scale)
            } else {
                0.0
            }
        })
        .collect();
    let logits = random_logits(&mut rng, s * a);
    let mdp = Mdp::new(s, a, spec.horizon, initial, transitions, rewards)?;
    let policy = SoftmaxPolicy::new(s, a, logits)?;
    Ok((mdp, policy))
}

/// One state, two arms paying 1 and 0, horizon 1, uniform policy.
pub fn bandit() -> (Mdp, SoftmaxPolicy) {
    let mdp =
        Mdp::new(1, 2, 1, vec![1.0], vec![1.0, 1.0], vec![1.0, 0.0]).expect("bandit is valid");
    (mdp, SoftmaxPolicy::uniform(1, 2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub num_states: usize,
    pub horizon: usize,
    pub seed: u64,
}

/// Positive-reward chain: states on a line, action 0 moves left and action 1
/// moves right, slipping in place with a per-instance probability in
/// `[0.05, 0.3]`. Rewards are uniform on `[0.1, 1]`; start in state 0.
pub fn chain_instance(spec: &ChainSpec) -> Result<(Mdp, SoftmaxPolicy)> {
    let n = spec.num_states;
    if n < 2 || spec.horizon == 0 {
        return Err(validation(
            "chain needs at least 2 states and a positive horizon",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slip: f64 = rng.gen_range(0.05..=0.3);
    let mut transitions = vec![0.0; n * 2 * n];
    for s in 0..n {
        for a in 0..2 {
            let target = if a == 0 {
                s.saturating_sub(1)
            } else {
                (s + 1).min(n - 1)
            };
            let row = &mut transitions[(s * 2 + a) * n..(s * 2 + a + 1) * n];
            row[target] += 1.0 - slip;
            row[s] += slip;
        }
    }
    let rewards: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(0.1..=1.0)).collect();
    let logits = random_logits(&mut rng, n * 2);
    let mut initial = vec![0.0; n];
    initial[0] = 1.0;
    let mdp = Mdp::new(n, 2, spec.horizon, initial, transitions, rewards)?;
    Ok((mdp, SoftmaxPolicy::new(n, 2, logits)?))
}
