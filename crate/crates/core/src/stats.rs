//! Streaming moments and the z-score bands used by every statistical check.

use serde::{Deserialize, Serialize};

/// Deviations up to this many standard errors pass.
pub const PASS_Z: f64 = 4.0;
/// Deviations above this many standard errors fail; between the two they warn.
pub const FAIL_Z: f64 = 6.0;
/// Deviations at or below this absolute size count as zero whatever the
/// standard error. Matches the tolerance used for exact zeros.
pub const ABSOLUTE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Warn,
    Fail,
}

impl Status {
    pub fn from_z(z: f64) -> Self {
        if z <= PASS_Z {
            Status::Pass
        } else if z <= FAIL_Z {
            Status::Warn
        } else {
            Status::Fail
        }
    }

    /// Pass if `measured <= threshold`, fail otherwise (also on NaN).
    pub fn from_bound(measured: f64, threshold: f64) -> Self {
        if measured <= threshold {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

/// `|estimate - target| / stderr`; `0` when the deviation is within
/// [`ABSOLUTE_SLACK`], `+inf` when it is not and the standard error is zero.
///
/// The floor matters for near-deterministic policies, where an action of
/// probability ~1e-18 never appears in the sample and leaves a bias of that
/// order against a standard error that is smaller still.
pub fn z_score(estimate: f64, target: f64, stderr: f64) -> f64 {
    let dev = (estimate - target).abs();
    if dev <= ABSOLUTE_SLACK {
        0.0
    } else if stderr > 0.0 {
        dev / stderr
    } else {
        f64::INFINITY
    }
}

/// Per-component running mean and sum of squared deviations (Welford), with
/// Chan's pairwise merge for combining chunks.
#[derive(Clone, Debug)]
pub struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * (nb / n);
            self.m2[i] += other.m2[i] + delta * delta * (na * nb / n);
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per component.
    pub fn variance(&self) -> Vec<f64> {
        let denom = self.count.saturating_sub(1).max(1) as f64;
        self.m2.iter().map(|s| (s / denom).max(0.0)).collect()
    }

    /// Standard error of the mean per component.
    pub fn stderr(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.variance()
            .into_iter()
            .map(|v| (v / n).sqrt())
            .collect()
    }
}
