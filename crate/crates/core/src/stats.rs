//! Running moments and deterministic chunked Monte Carlo reduction.

use rayon::prelude::*;
use serde::Serialize;

/// Number of chunks Monte Carlo loops are split into. Results depend on the
/// chunk count, never on the number of worker threads.
pub const DEFAULT_CHUNKS: usize = 64;

/// Mean and variance by Welford's update, mergeable across chunks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean(),
            stderr: self.stderr(),
            n: self.n,
        }
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: u64,
}

impl Estimate {
    /// `|self - other|` measured in combined standard errors.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        (self.mean - other.mean).abs() / self.stderr.hypot(other.stderr)
    }

    /// `|self - value|` in standard errors.
    pub fn z_from(&self, value: f64) -> f64 {
        (self.mean - value).abs() / self.stderr
    }
}

/// Folds items `0..n` into per-chunk accumulators in parallel, then merges the
/// chunks in index order.
pub fn chunked_fold<A, I, F, M>(n: u64, chunks: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, u64) + Sync,
    M: Fn(&mut A, A),
{
    let chunks = chunks.max(1) as u64;
    let size = n.div_ceil(chunks).max(1);
    let parts: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            let start = c * size;
            let end = ((c + 1) * size).min(n);
            for i in start..end {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut iter = parts.into_iter();
    let mut total = iter.next().unwrap_or_else(&init);
    for part in iter {
        merge(&mut total, part);
    }
    total
}
