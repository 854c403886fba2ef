//! Streaming moments and the deterministic parallel reduction used by every
//! Monte Carlo estimate.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Paths handled by one sequential block. Fixed, so the reduction tree does not
/// depend on the number of worker threads.
pub const CHUNK: usize = 1024;

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn new(value: f64, se: f64) -> Self {
        Self { value, se }
    }

    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    /// Number of joint standard errors separating two independent estimates.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        let s = (self.se * self.se + other.se * other.se).sqrt();
        let d = (self.value - other.value).abs();
        if s == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / s
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.value - target).abs() <= n_se * self.se + 1e-12 * target.abs().max(1.0)
    }
}

/// Welford accumulator for mean and variance.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Chan's pairwise update.
    pub fn merge(&mut self, o: &Moments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        let w = o.n as f64 / n as f64;
        self.mean += d * w;
        self.m2 += o.m2 + d * d * self.n as f64 * w;
        self.n = n;
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn se(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate::new(self.mean, self.se())
    }

    /// Standard error of the unbiased variance estimate, from the fourth
    /// moment. Needs the fourth central moment, so callers supply it.
    pub fn variance_se(&self, fourth_central: f64) -> f64 {
        if self.n < 4 {
            return 0.0;
        }
        let n = self.n as f64;
        let v = self.variance();
        ((fourth_central - (n - 3.0) / (n - 1.0) * v * v) / n).max(0.0).sqrt()
    }
}

/// Running covariance of two streams.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CoMoments {
    pub n: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    pub m2_x: f64,
    pub m2_y: f64,
    pub c_xy: f64,
}

impl CoMoments {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let n = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / n;
        self.mean_y += dy / n;
        self.m2_x += dx * (x - self.mean_x);
        self.m2_y += dy * (y - self.mean_y);
        self.c_xy += dx * (y - self.mean_y);
    }

    pub fn merge(&mut self, o: &CoMoments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = (self.n + o.n) as f64;
        let (na, nb) = (self.n as f64, o.n as f64);
        let dx = o.mean_x - self.mean_x;
        let dy = o.mean_y - self.mean_y;
        self.mean_x += dx * nb / n;
        self.mean_y += dy * nb / n;
        self.m2_x += o.m2_x + dx * dx * na * nb / n;
        self.m2_y += o.m2_y + dy * dy * na * nb / n;
        self.c_xy += o.c_xy + dx * dy * na * nb / n;
        self.n += o.n;
    }

    pub fn covariance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.c_xy / (self.n - 1) as f64
        }
    }

    pub fn correlation(&self) -> f64 {
        let d = (self.m2_x * self.m2_y).sqrt();
        if d == 0.0 {
            0.0
        } else {
            self.c_xy / d
        }
    }

    /// Estimate of E[x] - beta * (E[y] - y_mean) with the optimal beta.
    pub fn controlled_mean(&self, y_mean: f64) -> (f64, f64) {
        let n = self.n as f64;
        if self.m2_y == 0.0 {
            return (self.mean_x, (self.m2_x / (n - 1.0) / n).sqrt());
        }
        let beta = self.c_xy / self.m2_y;
        let resid = (self.m2_x - beta * self.c_xy).max(0.0) / (n - 2.0).max(1.0);
        (self.mean_x - beta * (self.mean_y - y_mean), (resid / n).sqrt())
    }
}

/// Accumulators that can be merged in a fixed order.
pub trait Merge: Send {
    fn merge_from(&mut self, other: Self);
}

impl Merge for Moments {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other)
    }
}

impl Merge for CoMoments {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other)
    }
}

impl Merge for Vec<Moments> {
    fn merge_from(&mut self, other: Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.merge(b);
        }
    }
}

impl Merge for Vec<CoMoments> {
    fn merge_from(&mut self, other: Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.merge(b);
        }
    }
}

impl Merge for Vec<f64> {
    fn merge_from(&mut self, other: Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += b;
        }
    }
}

impl<A: Merge, B: Merge> Merge for (A, B) {
    fn merge_from(&mut self, other: Self) {
        self.0.merge_from(other.0);
        self.1.merge_from(other.1);
    }
}

fn tree_merge<A: Merge>(mut parts: Vec<A>) -> Option<A> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge_from(b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.into_iter().next()
}

/// Folds every path index in `0..n` into an accumulator. Paths are processed
/// sequentially inside fixed-size chunks and chunk results are merged by
/// recursive halving of the chunk range, so the merge tree depends only on
/// `n` and the result is bit-identical for any thread count. At most one
/// accumulator per tree level and worker is alive at a time. The first error
/// in index order wins.
pub fn reduce_paths<A, S, I, W, F>(n: usize, init: I, scratch: W, fold: F) -> Result<A>
where
    A: Merge,
    I: Fn() -> A + Sync,
    W: Fn() -> S + Sync,
    F: Fn(&mut A, &mut S, usize) -> Result<()> + Sync,
{
    fn go<A, S, I, W, F>(lo: usize, hi: usize, n: usize, init: &I, scratch: &W, fold: &F) -> Result<A>
    where
        A: Merge,
        I: Fn() -> A + Sync,
        W: Fn() -> S + Sync,
        F: Fn(&mut A, &mut S, usize) -> Result<()> + Sync,
    {
        if hi - lo == 1 {
            let mut acc = init();
            let mut s = scratch();
            let a = lo * CHUNK;
            for i in a..(a + CHUNK).min(n) {
                fold(&mut acc, &mut s, i)?;
            }
            return Ok(acc);
        }
        let mid = lo + (hi - lo) / 2;
        let (left, right) = rayon::join(|| go(lo, mid, n, init, scratch, fold), || go(mid, hi, n, init, scratch, fold));
        let mut left = left?;
        left.merge_from(right?);
        Ok(left)
    }
    let n_chunks = n.div_ceil(CHUNK);
    if n_chunks == 0 {
        return Ok(init());
    }
    go(0, n_chunks, n, &init, &scratch, &fold)
}

/// Evaluates a per-path map into a vector, in path order.
pub fn map_paths<T, S, W, F>(n: usize, scratch: W, f: F) -> Result<Vec<T>>
where
    T: Send,
    W: Fn() -> S + Sync,
    F: Fn(&mut S, usize) -> Result<T> + Sync,
{
    let chunks: Vec<Result<Vec<T>>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = scratch();
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(|i| f(&mut s, i)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Pairwise summation of a slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Moments of a slice, reduced with the same chunked tree as `reduce_paths`.
pub fn moments_of(xs: &[f64]) -> Moments {
    let parts: Vec<Moments> = xs
        .chunks(CHUNK)
        .map(|c| {
            let mut m = Moments::default();
            c.iter().for_each(|&x| m.push(x));
            m
        })
        .collect();
    tree_merge(parts).unwrap_or_default()
}

pub fn require_finite(x: f64, what: &str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
