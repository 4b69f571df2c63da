//! Tabular softmax policy and its closed-form score function.
//!
//! Parameters are one logit per `(state, action)` pair, flattened state-major:
//! index `s * num_actions + a`. Every [`GradientVector`] in the crate uses the
//! same layout.

use std::ops::{Index, IndexMut};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::mdp::Prefix;

/// A real vector laid out like the flattened logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        for (x, y) in self.0.iter_mut().zip(&other.0) {
            *x += scale * y;
        }
    }

    pub fn sub(&self, other: &GradientVector) -> GradientVector {
        assert_eq!(self.len(), other.len(), "gradient length mismatch");
        GradientVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute component-wise difference.
    pub fn max_abs_diff(&self, other: &GradientVector) -> f64 {
        self.sub(other).max_abs()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for GradientVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    logits: Vec<Vec<f64>>,
}

impl SoftmaxPolicy {
    /// Builds a policy from a flat, state-major logit vector.
    pub fn new(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(validation("policy needs at least one state and one action"));
        }
        if logits.len() != num_states * num_actions {
            return Err(validation(format!(
                "expected {} logits, got {}",
                num_states * num_actions,
                logits.len()
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(validation(format!("logit {i} is not finite")));
        }
        Ok(Self {
            num_states,
            num_actions,
            logits,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self::new(num_states, num_actions, vec![0.0; num_states * num_actions])
            .expect("zero logits are valid")
    }

    /// Builds a policy from a `[state][action]` table.
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self> {
        let num_states = table.len();
        let num_actions = table.first().map_or(0, Vec::len);
        if table.iter().any(|row| row.len() != num_actions) {
            return Err(validation("ragged logit table"));
        }
        Self::new(num_states, num_actions, table.concat())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: PolicyFile = serde_json::from_str(s)?;
        Self::from_table(&file.logits)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let logits = self
            .logits
            .chunks(self.num_actions)
            .map(<[f64]>::to_vec)
            .collect();
        serde_json::to_string(&PolicyFile { logits }).expect("policy serializes")
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn param_index(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    fn row(&self, s: usize) -> &[f64] {
        assert!(s < self.num_states, "state {s} out of range");
        &self.logits[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// Copy with parameter `k` moved by `delta`.
    pub fn perturbed(&self, k: usize, delta: f64) -> Self {
        let mut p = self.clone();
        p.logits[k] += delta;
        p
    }

    /// Gradient ascent step: `logits += lr * grad`.
    pub fn step(&mut self, grad: &GradientVector, lr: f64) {
        assert_eq!(grad.len(), self.logits.len());
        for (x, g) in self.logits.iter_mut().zip(grad.as_slice()) {
            *x += lr * g;
        }
    }

    /// `π(·|s)` via max-subtracted softmax.
    pub fn action_probs(&self, s: usize) -> Vec<f64> {
        let row = self.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// All action probabilities as a flat state-major table.
    pub fn prob_table(&self) -> Vec<f64> {
        (0..self.num_states)
            .flat_map(|s| self.action_probs(s))
            .collect()
    }

    /// `log π(a|s)` by log-sum-exp.
    pub fn log_prob(&self, s: usize, a: usize) -> f64 {
        let row = self.row(s);
        assert!(a < self.num_actions, "action {a} out of range");
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row[a] - lse
    }

    /// Adds `scale * ∇ log π(a|s)` into `out` without allocating a full vector.
    ///
    /// Only the row of state `s` is touched: entry `(s, a')` receives
    /// `scale * (1[a' = a] - π(a'|s))`.
    pub fn accumulate_score(&self, s: usize, a: usize, scale: f64, out: &mut [f64]) {
        let probs = self.action_probs(s);
        let base = s * self.num_actions;
        for (b, p) in probs.iter().enumerate() {
            let indicator = if b == a { 1.0 } else { 0.0 };
            out[base + b] += scale * (indicator - p);
        }
    }

    /// `∇ log π(a|s)`.
    pub fn score(&self, s: usize, a: usize) -> GradientVector {
        assert!(a < self.num_actions, "action {a} out of range");
        let mut g = GradientVector::zeros(self.num_params());
        self.accumulate_score(s, a, 1.0, &mut g.0);
        g
    }

    /// `∇ log p(τ_t) = Σ_{i ≤ t} ∇ log π(a_i|s_i)`; dynamics carry no parameters.
    pub fn prefix_score(&self, prefix: &Prefix) -> GradientVector {
        let mut g = GradientVector::zeros(self.num_params());
        for (&s, &a) in prefix.states().iter().zip(prefix.actions()) {
            self.accumulate_score(s, a, 1.0, &mut g.0);
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_logits_are_uniform() {
        let p = SoftmaxPolicy::uniform(1, 2);
        assert_eq!(p.action_probs(0), vec![0.5, 0.5]);
        assert_abs_diff_eq!(p.log_prob(0, 1), 0.5f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn ln2_logits_give_two_thirds() {
        let p = SoftmaxPolicy::new(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        let probs = p.action_probs(0);
        assert_abs_diff_eq!(probs[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(probs[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn shift_invariance() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]).unwrap();
        let mut shifted = p.clone();
        for a in 0..3 {
            shifted = shifted.perturbed(p.param_index(1, a), 17.25);
        }
        for s in 0..2 {
            for (x, y) in p.action_probs(s).iter().zip(shifted.action_probs(s)) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let p = SoftmaxPolicy::new(1, 2, vec![1000.0, 0.0]).unwrap();
        let probs = p.action_probs(0);
        assert_eq!(probs[0], 1.0);
        assert!(p.log_prob(0, 1).is_finite());
    }

    #[test]
    fn log_prob_is_consistent_with_probs() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, 0.9, -2.0, 3.0, 3.0, -1.0]).unwrap();
        for s in 0..2 {
            let probs = p.action_probs(s);
            let mut total = 0.0;
            for (a, &prob) in probs.iter().enumerate() {
                let e = p.log_prob(s, a).exp();
                assert_abs_diff_eq!(e, prob, epsilon = 1e-15);
                total += e;
            }
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn score_closed_form_at_zero_logits() {
        let p = SoftmaxPolicy::uniform(2, 2);
        assert_eq!(p.score(1, 0).0, vec![0.0, 0.0, 0.5, -0.5]);
    }

    #[test]
    fn expected_score_vanishes() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, 0.9, -2.0, 3.0, 3.0, -1.0]).unwrap();
        for s in 0..2 {
            let mut acc = GradientVector::zeros(6);
            for (a, pa) in p.action_probs(s).into_iter().enumerate() {
                acc.add_scaled(&p.score(s, a), pa);
            }
            assert!(acc.max_abs() <= 1e-12);
        }
    }

    #[test]
    fn score_matches_central_difference() {
        let p = SoftmaxPolicy::new(2, 3, vec![0.1, 0.9, -2.0, 3.0, 3.0, -1.0]).unwrap();
        let h = 1e-5;
        for s in 0..2 {
            for a in 0..3 {
                let g = p.score(s, a);
                for k in 0..6 {
                    let fd = (p.perturbed(k, h).log_prob(s, a) - p.perturbed(k, -h).log_prob(s, a))
                        / (2.0 * h);
                    assert!((fd - g[k]).abs() <= 1e-8, "s={s} a={a} k={k}");
                }
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(SoftmaxPolicy::new(2, 2, vec![0.0; 3]).is_err());
        assert!(SoftmaxPolicy::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(SoftmaxPolicy::from_json_str(r#"{"logits": [[0.0, 1.0], [2.0]]}"#).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = SoftmaxPolicy::new(2, 2, vec![0.25, -1.0, 3.5, 0.0]).unwrap();
        let q = SoftmaxPolicy::from_json_str(&p.to_json_string()).unwrap();
        assert_eq!(p, q);
    }
}
