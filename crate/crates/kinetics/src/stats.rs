//! Monte Carlo estimates with standard errors and deterministic reduction.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Number of combined standard errors separating two estimates.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        let s = (self.stderr * self.stderr + other.stderr * other.stderr).sqrt();
        let diff = (self.value - other.value).abs();
        if s == 0.0 {
            if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            diff / s
        }
    }
}

/// Running first and second moments.
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(self, o: Moments) -> Moments {
        Moments {
            n: self.n + o.n,
            sum: self.sum + o.sum,
            sum_sq: self.sum_sq + o.sum_sq,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Mean with the standard error of the mean.
    pub fn estimate(&self) -> Estimate {
        if self.n == 0 {
            return Estimate::exact(0.0);
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let var = if self.n > 1 {
            ((self.sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            value: mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Chunk size used for all parallel Monte Carlo loops; fixed so that the
/// reduction tree does not depend on the thread count.
pub const CHUNK: usize = 4096;

/// Run `f(chunk_index, range)` over fixed-size chunks in parallel and merge
/// the moments in chunk order.
pub fn chunked_moments<F>(samples: usize, f: F) -> Moments
where
    F: Fn(u64, std::ops::Range<usize>) -> Moments + Sync,
{
    let chunks = samples.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let start = c * CHUNK;
            let end = ((c + 1) * CHUNK).min(samples);
            f(c as u64, start..end)
        })
        .collect();
    pairwise_merge(&parts)
}

fn pairwise_merge(parts: &[Moments]) -> Moments {
    match parts.len() {
        0 => Moments::default(),
        1 => parts[0],
        n => pairwise_merge(&parts[..n / 2]).merge(pairwise_merge(&parts[n / 2..])),
    }
}

/// Deterministic pairwise sum.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 16 => xs.iter().sum(),
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}
