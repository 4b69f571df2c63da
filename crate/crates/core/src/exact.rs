//! Exact objective and gradients by enumeration and backward recursion.
//!
//! Three independent routes to `∇J(θ)` are provided:
//!
//! * [`exact_gradient_prefix`]: each reward `r_t` is paired with the score of
//!   its own prefix `τ_t` and summed against the prefix measure `p(τ_t)`.
//! * [`exact_gradient_fullreturn`]: the total return multiplies the score of
//!   the whole trajectory, summed against `p(τ)`.
//! * [`exact_gradient_q`]: state distributions propagated forward and `Q`
//!   tables computed backward, no enumeration at all.
//!
//! Every enumerated sum walks sequences in lexicographic order through
//! [`crate::sum::chunked_sum_with`] (Neumaier compensation, fixed chunking), so
//! all routes share one summation scheme and are reproducible for any worker
//! count.

use serde::Serialize;

use crate::error::{validation, Error, Result};
use crate::mdp::Mdp;
use crate::policy::{GradientVector, SoftmaxPolicy};
use crate::sum::{chunked_sum_with, NeumaierVec};

/// Relative tolerance between the two evaluations performed by [`objective`].
pub const OBJECTIVE_FORM_TOLERANCE: f64 = 1e-12;

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// `Q_t(s, a) = E[Σ_{i ≥ t} r_i | s_t = s, a_t = a]`, for `t` in `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        assert!(
            (1..=self.horizon).contains(&t),
            "time step {t} out of range"
        );
        self.values[((t - 1) * self.num_states + s) * self.num_actions + a]
    }

    /// The `[state][action]` slice for time step `t`.
    pub fn step(&self, t: usize) -> &[f64] {
        assert!(
            (1..=self.horizon).contains(&t),
            "time step {t} out of range"
        );
        let width = self.num_states * self.num_actions;
        &self.values[(t - 1) * width..t * width]
    }
}

/// `V_t(s) = Σ_a π(a|s) Q_t(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VTable {
    horizon: usize,
    num_states: usize,
    values: Vec<f64>,
}

impl VTable {
    pub fn get(&self, t: usize, s: usize) -> f64 {
        assert!(
            (1..=self.horizon).contains(&t),
            "time step {t} out of range"
        );
        self.values[(t - 1) * self.num_states + s]
    }

    pub fn step(&self, t: usize) -> &[f64] {
        assert!(
            (1..=self.horizon).contains(&t),
            "time step {t} out of range"
        );
        &self.values[(t - 1) * self.num_states..t * self.num_states]
    }
}

struct Scratch {
    states: Vec<usize>,
    actions: Vec<usize>,
    grad: Vec<f64>,
}

impl Scratch {
    fn new(len: usize, params: usize) -> Self {
        Self {
            states: vec![0; len],
            actions: vec![0; len],
            grad: vec![0.0; params],
        }
    }
}

/// Adds `scale * ∇ log π(a|s)` using a precomputed probability table.
#[inline]
fn add_score(out: &mut [f64], probs: &[f64], num_actions: usize, s: usize, a: usize, scale: f64) {
    let base = s * num_actions;
    for b in 0..num_actions {
        let indicator = if b == a { 1.0 } else { 0.0 };
        out[base + b] += scale * (indicator - probs[base + b]);
    }
}

/// Writes `Σ_i ∇ log π(a_i|s_i)` into `out`.
fn sequence_score(
    out: &mut [f64],
    probs: &[f64],
    num_actions: usize,
    states: &[usize],
    actions: &[usize],
) {
    out.iter_mut().for_each(|x| *x = 0.0);
    for (&s, &a) in states.iter().zip(actions) {
        add_score(out, probs, num_actions, s, a, 1.0);
    }
}

fn check_time(mdp: &Mdp, name: &str, t: usize) -> Result<()> {
    if t == 0 || t > mdp.horizon() {
        return Err(validation(format!(
            "time index {name}={t} outside [1, {}]",
            mdp.horizon()
        )));
    }
    Ok(())
}

/// Sums `f` over all full trajectories, each visit seeing `(states, actions, p(τ))`.
fn sum_over_trajectories<F>(
    mdp: &Mdp,
    probs: &[f64],
    len: usize,
    params: usize,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut NeumaierVec, &mut Vec<f64>, &[usize], &[usize], f64) + Sync,
{
    sum_over_sequences(mdp, probs, mdp.horizon(), len, params, f)
}

fn sum_over_sequences<F>(
    mdp: &Mdp,
    probs: &[f64],
    seq_len: usize,
    len: usize,
    params: usize,
    f: F,
) -> Result<Vec<f64>>
where
    F: Fn(&mut NeumaierVec, &mut Vec<f64>, &[usize], &[usize], f64) + Sync,
{
    let count = mdp.sequence_count(seq_len)?;
    Ok(chunked_sum_with(
        count,
        len,
        || Scratch::new(seq_len, params),
        |acc, scratch, k| {
            mdp.decode_sequence(k, &mut scratch.states, &mut scratch.actions);
            let density = mdp.sequence_density(probs, &scratch.states, &scratch.actions);
            if density == 0.0 {
                return;
            }
            f(
                acc,
                &mut scratch.grad,
                &scratch.states,
                &scratch.actions,
                density,
            );
        },
    ))
}

/// `Σ_τ p(τ)`, which must be one.
pub fn trajectory_mass(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<f64> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let v = sum_over_trajectories(mdp, &probs, 1, 0, |acc, _, _, _, p| acc.add_at(0, p))?;
    Ok(v[0])
}

/// `Σ_{τ_t} p(τ_t)` over all prefixes of length `t`, which must be one.
pub fn prefix_mass(mdp: &Mdp, policy: &SoftmaxPolicy, t: usize) -> Result<f64> {
    mdp.check_policy(policy)?;
    check_time(mdp, "t", t)?;
    let probs = policy.prob_table();
    let v = sum_over_sequences(mdp, &probs, t, 1, 0, |acc, _, _, _, p| acc.add_at(0, p))?;
    Ok(v[0])
}

/// `J(θ) = Σ_τ p(τ) Σ_t r_t`, the trajectory-level form.
pub fn objective_trajectory_form(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<f64> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let v = sum_over_trajectories(mdp, &probs, 1, 0, |acc, _, states, actions, p| {
        let ret: f64 = mdp.sequence_rewards(states, actions).sum();
        acc.add_at(0, p * ret);
    })?;
    Ok(v[0])
}

/// `J(θ) = Σ_t Σ_{τ_t} p(τ_t) r_t`, each reward weighed by its own prefix measure.
pub fn objective_prefix_form(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<f64> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let mut total = NeumaierVec::zeros(1);
    for t in 1..=mdp.horizon() {
        let v = sum_over_sequences(mdp, &probs, t, 1, 0, |acc, _, states, actions, p| {
            acc.add_at(0, p * mdp.reward(states[t - 1], actions[t - 1]));
        })?;
        total.add_scaled(&v, 1.0);
    }
    Ok(total.values()[0])
}

/// Expected total reward.
///
/// Evaluated both over full trajectories and over prefixes; the trajectory
/// form is returned once the two agree to `1e-12` relative.
pub fn objective(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<f64> {
    let full = objective_trajectory_form(mdp, policy)?;
    let prefix = objective_prefix_form(mdp, policy)?;
    let gap = (full - prefix).abs();
    if gap > OBJECTIVE_FORM_TOLERANCE * full.abs().max(1.0) {
        return Err(Error::InvariantViolation(format!(
            "objective forms disagree: trajectory {full}, prefix {prefix}, gap {gap:e}"
        )));
    }
    Ok(full)
}

/// `Σ_t Σ_{τ_t} p(τ_t) ∇log p(τ_t) r_t`, the prefix-measure gradient.
pub fn exact_gradient_prefix(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<GradientVector> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let n = policy.num_params();
    let mut total = NeumaierVec::zeros(n);
    for t in 1..=mdp.horizon() {
        let v = sum_over_sequences(mdp, &probs, t, n, n, |acc, grad, states, actions, p| {
            let r = mdp.reward(states[t - 1], actions[t - 1]);
            if r == 0.0 {
                return;
            }
            sequence_score(grad, &probs, na, states, actions);
            acc.add_scaled(grad, p * r);
        })?;
        total.add_scaled(&v, 1.0);
    }
    Ok(GradientVector(total.values()))
}

/// The prefix-measure gradient regrouped by score index.
///
/// Entry `j - 1` is `Σ_{t ≥ j} Σ_{τ_t} p(τ_t) ∇log π(a_j|s_j) r_t`; the entries
/// sum to [`exact_gradient_prefix`].
pub fn prefix_gradient_by_score_index(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
) -> Result<Vec<GradientVector>> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let n = policy.num_params();
    let horizon = mdp.horizon();
    let mut total = NeumaierVec::zeros(horizon * n);
    for t in 1..=horizon {
        let v = sum_over_sequences(
            mdp,
            &probs,
            t,
            horizon * n,
            0,
            |acc, _, states, actions, p| {
                let w = p * mdp.reward(states[t - 1], actions[t - 1]);
                for j in 0..t {
                    let (s, a) = (states[j], actions[j]);
                    let base = s * na;
                    for b in 0..na {
                        let indicator = if b == a { 1.0 } else { 0.0 };
                        acc.add_at(j * n + base + b, w * (indicator - probs[base + b]));
                    }
                }
            },
        )?;
        total.add_scaled(&v, 1.0);
    }
    Ok(split_terms(total.values(), n))
}

fn split_terms(flat: Vec<f64>, n: usize) -> Vec<GradientVector> {
    flat.chunks(n).map(|c| GradientVector(c.to_vec())).collect()
}

/// `Σ_τ p(τ) (Σ_j ∇log π(a_j|s_j)) (Σ_t r_t)`, the full-return gradient.
pub fn exact_gradient_fullreturn(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<GradientVector> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let n = policy.num_params();
    let v = sum_over_trajectories(mdp, &probs, n, n, |acc, grad, states, actions, p| {
        let ret: f64 = mdp.sequence_rewards(states, actions).sum();
        sequence_score(grad, &probs, na, states, actions);
        acc.add_scaled(grad, p * ret);
    })?;
    Ok(GradientVector(v))
}

/// The full-return gradient split by score index: entry `j - 1` is
/// `Σ_τ p(τ) ∇log π(a_j|s_j) Σ_t r_t`.
pub fn fullreturn_gradient_by_score_index(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
) -> Result<Vec<GradientVector>> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let n = policy.num_params();
    let horizon = mdp.horizon();
    let v = sum_over_trajectories(
        mdp,
        &probs,
        horizon * n,
        n,
        |acc, grad, states, actions, p| {
            let w = p * mdp.sequence_rewards(states, actions).sum::<f64>();
            for j in 0..horizon {
                grad.iter_mut().for_each(|x| *x = 0.0);
                add_score(grad, &probs, na, states[j], actions[j], 1.0);
                for (k, g) in grad.iter().enumerate() {
                    if *g != 0.0 {
                        acc.add_at(j * n + k, w * g);
                    }
                }
            }
        },
    )?;
    Ok(split_terms(v, n))
}

/// `Σ_τ p(τ) Σ_j ∇log π(a_j|s_j) R_j` with the realized reward-to-go.
pub fn exact_gradient_reward_to_go(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<GradientVector> {
    reward_to_go_gradient_with_offset(mdp, policy, 0)
}

/// Reward-to-go gradient pairing score `j` with `R_{j + offset}` (zero past `T`).
///
/// Only `offset = 0` is a valid gradient. Nonzero offsets exist so that
/// verification suites can confirm their equality checks detect an
/// off-by-one reward-to-go.
pub fn reward_to_go_gradient_with_offset(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    offset: usize,
) -> Result<GradientVector> {
    mdp.check_policy(policy)?;
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let n = policy.num_params();
    let horizon = mdp.horizon();
    let v = sum_over_trajectories(mdp, &probs, n, n, |acc, grad, states, actions, p| {
        let mut to_go = vec![0.0; horizon + 1];
        for i in (0..horizon).rev() {
            to_go[i] = to_go[i + 1] + mdp.reward(states[i], actions[i]);
        }
        grad.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..horizon {
            let r = to_go.get(j + offset).copied().unwrap_or(0.0);
            add_score(grad, &probs, na, states[j], actions[j], r);
        }
        acc.add_scaled(grad, p);
    })?;
    Ok(GradientVector(v))
}

/// Backward recursion for `Q_t` and `V_t`; no enumeration.
pub fn q_values(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<(QTable, VTable)> {
    mdp.check_policy(policy)?;
    let (ns, na, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let probs = policy.prob_table();
    let mut q = vec![0.0; horizon * ns * na];
    let mut v = vec![0.0; horizon * ns];
    for t in (0..horizon).rev() {
        for s in 0..ns {
            for a in 0..na {
                let mut value = mdp.reward(s, a);
                if t + 1 < horizon {
                    let next_v = &v[(t + 1) * ns..(t + 2) * ns];
                    value += mdp
                        .next_state_probs(s, a)
                        .iter()
                        .zip(next_v)
                        .map(|(p, vn)| p * vn)
                        .sum::<f64>();
                }
                q[(t * ns + s) * na + a] = value;
            }
            v[t * ns + s] = (0..na)
                .map(|a| probs[s * na + a] * q[(t * ns + s) * na + a])
                .sum();
        }
    }
    Ok((
        QTable {
            horizon,
            num_states: ns,
            num_actions: na,
            values: q,
        },
        VTable {
            horizon,
            num_states: ns,
            values: v,
        },
    ))
}

/// `μ_j(s) = P(s_j = s)` for `j = 1..=T`, propagated forward by exact
/// matrix-vector products.
pub fn state_distributions(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<Vec<Vec<f64>>> {
    mdp.check_policy(policy)?;
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let probs = policy.prob_table();
    let mut out = Vec::with_capacity(mdp.horizon());
    let mut mu = mdp.initial_dist().to_vec();
    for _ in 1..mdp.horizon() {
        let mut next = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                let w = mu[s] * probs[s * na + a];
                if w == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(mdp.next_state_probs(s, a)) {
                    *n += w * p;
                }
            }
        }
        out.push(std::mem::replace(&mut mu, next));
    }
    out.push(mu);
    Ok(out)
}

/// `Σ_j Σ_{s,a} μ_j(s) π(a|s) Q_j(s,a) ∇log π(a|s)`.
pub fn exact_gradient_q(mdp: &Mdp, policy: &SoftmaxPolicy) -> Result<GradientVector> {
    let (q, _) = q_values(mdp, policy)?;
    let mu = state_distributions(mdp, policy)?;
    let na = mdp.num_actions();
    let probs = policy.prob_table();
    let n = policy.num_params();
    let mut acc = NeumaierVec::zeros(n);
    let mut row = vec![0.0; n];
    for (j, mu_j) in mu.iter().enumerate() {
        for (s, &m) in mu_j.iter().enumerate() {
            for a in 0..na {
                let w = m * probs[s * na + a] * q.get(j + 1, s, a);
                if w == 0.0 {
                    continue;
                }
                row.iter_mut().for_each(|x| *x = 0.0);
                add_score(&mut row, &probs, na, s, a, 1.0);
                acc.add_scaled(&row, w);
            }
        }
    }
    Ok(GradientVector(acc.values()))
}

/// `E[∇log π(a_j|s_j) r_t]` over enumerated trajectories (1-based `j`, `t`).
///
/// Zero whenever `t < j`; for `t ≥ j` it is one of the pairings that make
/// up the prefix gradient.
pub fn cross_term(mdp: &Mdp, policy: &SoftmaxPolicy, j: usize, t: usize) -> Result<GradientVector> {
    mdp.check_policy(policy)?;
    check_time(mdp, "j", j)?;
    check_time(mdp, "t", t)?;
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let n = policy.num_params();
    let v = sum_over_trajectories(mdp, &probs, n, 0, |acc, _, states, actions, p| {
        let w = p * mdp.reward(states[t - 1], actions[t - 1]);
        let (s, a) = (states[j - 1], actions[j - 1]);
        let base = s * na;
        for b in 0..na {
            let indicator = if b == a { 1.0 } else { 0.0 };
            acc.add_at(base + b, w * (indicator - probs[base + b]));
        }
    })?;
    Ok(GradientVector(v))
}

/// Central differences of the enumerated objective, one parameter at a time.
pub fn finite_diff_gradient(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    step: f64,
) -> Result<GradientVector> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(validation(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    mdp.check_policy(policy)?;
    mdp.sequence_count(mdp.horizon())?;
    let mut g = GradientVector::zeros(policy.num_params());
    for k in 0..policy.num_params() {
        let plus = objective_trajectory_form(mdp, &policy.perturbed(k, step))?;
        let minus = objective_trajectory_form(mdp, &policy.perturbed(k, -step))?;
        g[k] = (plus - minus) / (2.0 * step);
    }
    Ok(g)
}

/// `E[Σ_{i ≥ t} r_i | s_t = s, a_t = a]` by enumerating every suffix
/// `(s_{t+1}, a_{t+1}, ..., s_T, a_T)`. Independent of [`q_values`].
pub fn suffix_expectation(
    mdp: &Mdp,
    policy: &SoftmaxPolicy,
    t: usize,
    s: usize,
    a: usize,
) -> Result<f64> {
    mdp.check_policy(policy)?;
    check_time(mdp, "t", t)?;
    if s >= mdp.num_states() || a >= mdp.num_actions() {
        return Err(validation(format!("state-action ({s}, {a}) out of range")));
    }
    let immediate = mdp.reward(s, a);
    let len = mdp.horizon() - t;
    if len == 0 {
        return Ok(immediate);
    }
    let probs = policy.prob_table();
    let na = mdp.num_actions();
    let count = mdp.sequence_count(len)?;
    let v = chunked_sum_with(
        count,
        1,
        || Scratch::new(len, 0),
        |acc, scratch, k| {
            mdp.decode_sequence(k, &mut scratch.states, &mut scratch.actions);
            let (states, actions) = (&scratch.states, &scratch.actions);
            let mut p = 1.0;
            let (mut prev_s, mut prev_a) = (s, a);
            for i in 0..len {
                p *= mdp.transition_prob(prev_s, prev_a, states[i])
                    * probs[states[i] * na + actions[i]];
                prev_s = states[i];
                prev_a = actions[i];
            }
            if p != 0.0 {
                acc.add_at(0, p * mdp.sequence_rewards(states, actions).sum::<f64>());
            }
        },
    );
    Ok(immediate + v[0])
}

/// Largest gap between [`q_values`] and [`suffix_expectation`] over all entries.
pub fn q_table_enumeration_gap(mdp: &Mdp, policy: &SoftmaxPolicy, q: &QTable) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for t in 1..=mdp.horizon() {
        for s in 0..mdp.num_states() {
            for a in 0..mdp.num_actions() {
                let enumerated = suffix_expectation(mdp, policy, t, s, a)?;
                worst = worst.max((enumerated - q.get(t, s, a)).abs());
            }
        }
    }
    Ok(worst)
}
