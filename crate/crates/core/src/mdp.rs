//! Finite-horizon tabular MDPs, trajectories, prefixes and their densities.
//!
//! Time steps are 1-based throughout the public API: a trajectory covers
//! steps `1..=T` and a prefix of length `t` covers steps `1..=t`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::policy::SoftmaxPolicy;
use crate::rng::sample_categorical;

/// Tolerance for probability vectors summing to one. Rows are rejected, never
/// renormalized.
pub const PROB_TOLERANCE: f64 = 1e-12;

/// Default maximum number of sequences an enumeration may visit.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    initial_dist: Vec<f64>,
    /// Flat `[state][action][next_state]`.
    transitions: Vec<f64>,
    /// Flat `[state][action]`.
    rewards: Vec<f64>,
    enumeration_cap: u64,
}

/// On-disk MDP layout, nested arrays with the exact field names of the file format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub initial_dist: Vec<f64>,
    pub transitions: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<f64>>,
}

fn check_distribution(what: &str, probs: &[f64]) -> Result<()> {
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(validation(format!(
            "{what}: entry {i} = {} is not a non-negative finite number",
            probs[i]
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(validation(format!(
            "{what}: entries sum to {total}, expected 1"
        )));
    }
    Ok(())
}

impl Mdp {
    /// Validates and builds an MDP from flat tables.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        initial_dist: Vec<f64>,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(validation("num_states and num_actions must be positive"));
        }
        if horizon == 0 {
            return Err(validation("horizon must be at least 1"));
        }
        if initial_dist.len() != num_states {
            return Err(validation(format!(
                "initial_dist has {} entries, expected {num_states}",
                initial_dist.len()
            )));
        }
        if transitions.len() != num_states * num_actions * num_states {
            return Err(validation(
                "transitions must be [num_states][num_actions][num_states]",
            ));
        }
        if rewards.len() != num_states * num_actions {
            return Err(validation("rewards must be [num_states][num_actions]"));
        }
        check_distribution("initial_dist", &initial_dist)?;
        for (row, probs) in transitions.chunks(num_states).enumerate() {
            let (s, a) = (row / num_actions, row % num_actions);
            check_distribution(&format!("transitions[{s}][{a}]"), probs)?;
        }
        if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
            return Err(validation(format!(
                "rewards[{}][{}] is not finite",
                i / num_actions,
                i % num_actions
            )));
        }
        Ok(Self {
            num_states,
            num_actions,
            horizon,
            initial_dist,
            transitions,
            rewards,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        })
    }

    pub fn from_file_layout(file: MdpFile) -> Result<Self> {
        let MdpFile {
            num_states,
            num_actions,
            horizon,
            initial_dist,
            transitions,
            rewards,
        } = file;
        if transitions.len() != num_states
            || transitions
                .iter()
                .any(|t| t.len() != num_actions || t.iter().any(|row| row.len() != num_states))
        {
            return Err(validation(
                "transitions must be [num_states][num_actions][num_states]",
            ));
        }
        if rewards.len() != num_states || rewards.iter().any(|r| r.len() != num_actions) {
            return Err(validation("rewards must be [num_states][num_actions]"));
        }
        let transitions = transitions.into_iter().flatten().flatten().collect();
        let rewards = rewards.into_iter().flatten().collect();
        Self::new(
            num_states,
            num_actions,
            horizon,
            initial_dist,
            transitions,
            rewards,
        )
    }

    pub fn to_file_layout(&self) -> MdpFile {
        let s = self.num_states;
        let a = self.num_actions;
        MdpFile {
            num_states: s,
            num_actions: a,
            horizon: self.horizon,
            initial_dist: self.initial_dist.clone(),
            transitions: self
                .transitions
                .chunks(a * s)
                .map(|per_state| per_state.chunks(s).map(<[f64]>::to_vec).collect())
                .collect(),
            rewards: self.rewards.chunks(a).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_file_layout(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_layout()).expect("mdp serializes")
    }

    /// Same model with a different enumeration cap.
    pub fn with_enumeration_cap(mut self, cap: u64) -> Self {
        self.enumeration_cap = cap;
        self
    }

    /// Same model with a different horizon.
    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(validation("horizon must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn enumeration_cap(&self) -> u64 {
        self.enumeration_cap
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn initial_prob(&self, s: usize) -> f64 {
        self.initial_dist[s]
    }

    /// `p(· | s, a)`
    pub fn next_state_probs(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.num_actions + a) * self.num_states;
        &self.transitions[base..base + self.num_states]
    }

    pub fn transition_prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.num_actions + a) * self.num_states + next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Errors unless the policy is shaped for this model.
    pub fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<()> {
        if policy.num_states() != self.num_states || policy.num_actions() != self.num_actions {
            return Err(validation(format!(
                "policy is {}x{}, mdp is {}x{}",
                policy.num_states(),
                policy.num_actions(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Number of state-action sequences of length `len`, refusing counts above the cap.
    pub fn sequence_count(&self, len: usize) -> Result<u64> {
        let base = (self.num_states * self.num_actions) as u128;
        let count = u32::try_from(len)
            .ok()
            .and_then(|l| base.checked_pow(l))
            .unwrap_or(u128::MAX);
        if count > self.enumeration_cap as u128 {
            return Err(Error::EnumerationTooLarge {
                count,
                cap: self.enumeration_cap,
            });
        }
        Ok(count as u64)
    }

    fn check_sequence(&self, states: &[usize], actions: &[usize]) -> Result<()> {
        if states.len() != actions.len() {
            return Err(validation("states and actions differ in length"));
        }
        if let Some(s) = states.iter().find(|&&s| s >= self.num_states) {
            return Err(validation(format!("state {s} out of range")));
        }
        if let Some(a) = actions.iter().find(|&&a| a >= self.num_actions) {
            return Err(validation(format!("action {a} out of range")));
        }
        Ok(())
    }

    /// Writes the `index`-th sequence of length `states.len()` in lexicographic
    /// order over `(s_1, a_1, s_2, a_2, ...)`, last pair varying fastest.
    pub fn decode_sequence(&self, mut index: u64, states: &mut [usize], actions: &mut [usize]) {
        let per_step = (self.num_states * self.num_actions) as u64;
        for i in (0..states.len()).rev() {
            let digit = (index % per_step) as usize;
            index /= per_step;
            states[i] = digit / self.num_actions;
            actions[i] = digit % self.num_actions;
        }
    }

    /// `p(s_1) ∏ π(a_i|s_i) ∏ p(s_{i+1}|s_i,a_i)` for a validated sequence.
    ///
    /// `probs` is the policy's flat probability table. Full trajectories and
    /// prefixes share this routine, so their densities agree bit-for-bit.
    pub fn sequence_density(&self, probs: &[f64], states: &[usize], actions: &[usize]) -> f64 {
        let mut density = self.initial_dist[states[0]];
        for i in 0..states.len() {
            let (s, a) = (states[i], actions[i]);
            density *= probs[s * self.num_actions + a];
            if i + 1 < states.len() {
                density *= self.transition_prob(s, a, states[i + 1]);
            }
        }
        density
    }

    pub fn sequence_rewards<'a>(
        &'a self,
        states: &'a [usize],
        actions: &'a [usize],
    ) -> impl Iterator<Item = f64> + 'a {
        states.iter().zip(actions).map(|(&s, &a)| self.reward(s, a))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl Trajectory {
    pub fn new(mdp: &Mdp, states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        mdp.check_sequence(&states, &actions)?;
        if states.len() != mdp.horizon() {
            return Err(validation(format!(
                "trajectory has length {}, horizon is {}",
                states.len(),
                mdp.horizon()
            )));
        }
        Ok(Self { states, actions })
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The prefix `τ_t` for `1 ≤ t ≤ T`.
    pub fn prefix(&self, t: usize) -> Result<Prefix> {
        if t == 0 || t > self.len() {
            return Err(validation(format!(
                "prefix length {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(Prefix {
            states: self.states[..t].to_vec(),
            actions: self.actions[..t].to_vec(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prefix {
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl Prefix {
    pub fn new(mdp: &Mdp, states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        mdp.check_sequence(&states, &actions)?;
        if states.is_empty() || states.len() > mdp.horizon() {
            return Err(validation(format!(
                "prefix length {} outside [1, {}]",
                states.len(),
                mdp.horizon()
            )));
        }
        Ok(Self { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }
}

pub fn trajectory_density(mdp: &Mdp, policy: &SoftmaxPolicy, traj: &Trajectory) -> Result<f64> {
    mdp.check_policy(policy)?;
    mdp.check_sequence(&traj.states, &traj.actions)?;
    if traj.len() != mdp.horizon() {
        return Err(validation("trajectory length differs from horizon"));
    }
    Ok(mdp.sequence_density(&policy.prob_table(), &traj.states, &traj.actions))
}

pub fn prefix_density(mdp: &Mdp, policy: &SoftmaxPolicy, prefix: &Prefix) -> Result<f64> {
    mdp.check_policy(policy)?;
    mdp.check_sequence(&prefix.states, &prefix.actions)?;
    if prefix.is_empty() || prefix.len() > mdp.horizon() {
        return Err(validation(format!(
            "prefix length {} outside [1, {}]",
            prefix.len(),
            mdp.horizon()
        )));
    }
    Ok(mdp.sequence_density(&policy.prob_table(), &prefix.states, &prefix.actions))
}

/// Lexicographic iterator over every state-action sequence of a fixed length.
pub struct SequenceIter<'a> {
    mdp: &'a Mdp,
    len: usize,
    next: u64,
    count: u64,
}

impl Iterator for SequenceIter<'_> {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let mut states = vec![0; self.len];
        let mut actions = vec![0; self.len];
        self.mdp
            .decode_sequence(self.next, &mut states, &mut actions);
        self.next += 1;
        Some((states, actions))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for SequenceIter<'_> {}

/// Every trajectory of the model exactly once, in lexicographic order.
pub fn enumerate_trajectories(mdp: &Mdp) -> Result<impl ExactSizeIterator<Item = Trajectory> + '_> {
    let count = mdp.sequence_count(mdp.horizon())?;
    Ok(SequenceIter {
        mdp,
        len: mdp.horizon(),
        next: 0,
        count,
    }
    .map(|(states, actions)| Trajectory { states, actions }))
}

/// Every prefix of length `t` exactly once, in lexicographic order.
pub fn enumerate_prefixes(
    mdp: &Mdp,
    t: usize,
) -> Result<impl ExactSizeIterator<Item = Prefix> + '_> {
    if t == 0 || t > mdp.horizon() {
        return Err(validation(format!(
            "prefix length {t} outside [1, {}]",
            mdp.horizon()
        )));
    }
    let count = mdp.sequence_count(t)?;
    Ok(SequenceIter {
        mdp,
        len: t,
        next: 0,
        count,
    }
    .map(|(states, actions)| Prefix { states, actions }))
}

/// Draws `s_1 ~ p(s_1)`, then alternately `a_t ~ π(·|s_t)` and `s_{t+1} ~ p(·|s_t,a_t)`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    rng: &mut R,
) -> Trajectory {
    let probs = policy.prob_table();
    sample_with_table(mdp, &probs, rng)
}

pub(crate) fn sample_with_table<R: Rng + ?Sized>(
    mdp: &Mdp,
    probs: &[f64],
    rng: &mut R,
) -> Trajectory {
    let horizon = mdp.horizon();
    let na = mdp.num_actions();
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = sample_categorical(rng, mdp.initial_dist());
    for t in 0..horizon {
        let a = sample_categorical(rng, &probs[s * na..(s + 1) * na]);
        states.push(s);
        actions.push(a);
        if t + 1 < horizon {
            s = sample_categorical(rng, mdp.next_state_probs(s, a));
        }
    }
    Trajectory { states, actions }
}

/// `Σ_{t=1}^T r(s_t, a_t)`
pub fn trajectory_return(mdp: &Mdp, traj: &Trajectory) -> f64 {
    mdp.sequence_rewards(&traj.states, &traj.actions).sum()
}

/// `R_j = Σ_{t=j}^T r(s_t, a_t)` for `1 ≤ j ≤ T`.
pub fn reward_to_go(mdp: &Mdp, traj: &Trajectory, j: usize) -> Result<f64> {
    if j == 0 || j > traj.len() {
        return Err(validation(format!(
            "time index {j} outside [1, {}]",
            traj.len()
        )));
    }
    Ok(mdp
        .sequence_rewards(&traj.states[j - 1..], &traj.actions[j - 1..])
        .sum())
}

/// All reward-to-go values `[R_1, ..., R_T]`, computed backwards.
pub fn rewards_to_go(mdp: &Mdp, traj: &Trajectory) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for i in (0..traj.len()).rev() {
        acc += mdp.reward(traj.states[i], traj.actions[i]);
        out[i] = acc;
    }
    out
}
