//! Compensated summation used by every enumerated sum in the crate.
//!
//! All exact routes accumulate with Neumaier's variant of Kahan summation,
//! walking sequences in lexicographic order in fixed-size chunks. Each chunk
//! is summed independently and chunk totals are folded in chunk order, so the
//! result depends only on [`CHUNK_SIZE`], never on the number of workers.

use rayon::prelude::*;

/// Number of consecutive sequences summed per chunk.
pub const CHUNK_SIZE: u64 = 4096;

/// Neumaier compensated accumulator for a scalar.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Component-wise compensated accumulator for a fixed-length vector.
#[derive(Clone, Debug)]
pub struct NeumaierVec {
    parts: Vec<NeumaierSum>,
}

impl NeumaierVec {
    pub fn zeros(len: usize) -> Self {
        Self {
            parts: vec![NeumaierSum::new(); len],
        }
    }

    #[inline]
    pub fn add_at(&mut self, index: usize, x: f64) {
        self.parts[index].add(x);
    }

    /// Adds `scale * v` component-wise.
    pub fn add_scaled(&mut self, v: &[f64], scale: f64) {
        debug_assert_eq!(v.len(), self.parts.len());
        for (p, x) in self.parts.iter_mut().zip(v) {
            p.add(scale * x);
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.parts.iter().map(NeumaierSum::value).collect()
    }
}

/// Sums `f(k)` for `k in 0..count` with chunked, order-stable compensation.
///
/// `f` receives an accumulator and the item index and adds its contribution
/// directly, which avoids allocating a vector per item.
pub fn chunked_sum<F>(count: u64, len: usize, f: F) -> Vec<f64>
where
    F: Fn(&mut NeumaierVec, u64) + Sync,
{
    chunked_sum_with(count, len, || (), |acc, _, k| f(acc, k))
}

/// Like [`chunked_sum`], with a scratch value built once per chunk.
pub fn chunked_sum_with<S, I, F>(count: u64, len: usize, init: I, f: F) -> Vec<f64>
where
    I: Fn() -> S + Sync,
    F: Fn(&mut NeumaierVec, &mut S, u64) + Sync,
{
    let chunks = count.div_ceil(CHUNK_SIZE);
    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = NeumaierVec::zeros(len);
            let mut scratch = init();
            let end = ((c + 1) * CHUNK_SIZE).min(count);
            for k in c * CHUNK_SIZE..end {
                f(&mut acc, &mut scratch, k);
            }
            acc.values()
        })
        .collect();
    let mut total = NeumaierVec::zeros(len);
    for p in &partials {
        total.add_scaled(p, 1.0);
    }
    total.values()
}
