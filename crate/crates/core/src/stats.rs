//! Monte Carlo estimates and deterministic parallel reductions.
//!
//! Work over paths is split into fixed blocks of [`BLOCK`] paths; blocks run
//! in parallel and their partial results are merged in block order, so every
//! estimate is bit-identical regardless of the thread count.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;

pub const BLOCK: usize = 256;

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, stderr: 0.0, n: 0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let mut acc = MeanAcc::default();
        for &x in xs {
            acc.push(x);
        }
        acc.estimate()
    }

    /// `|mean − target| ≤ z·stderr + TINY·(1 + |target|)`; the last term absorbs
    /// round-off for estimators with zero sample variance.
    pub fn within(&self, target: f64, z: f64) -> bool {
        (self.mean - target).abs() <= z * self.stderr + ROUNDOFF * (1.0 + target.abs())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { mean: c * self.mean, stderr: c.abs() * self.stderr, n: self.n }
    }

    /// Difference of two independent estimates.
    pub fn minus_independent(&self, other: &Estimate) -> Self {
        Self {
            mean: self.mean - other.mean,
            stderr: self.stderr.hypot(other.stderr),
            n: self.n.min(other.n),
        }
    }
}

/// Relative round-off floor used when a standard error is exactly zero.
pub const ROUNDOFF: f64 = 1e-12;

/// Welford accumulator with an order-stable merge.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAcc {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanAcc {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanAcc) {
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

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn estimate(&self) -> Estimate {
        let stderr = if self.n < 2 { 0.0 } else { (self.variance() / self.n as f64).sqrt() };
        Estimate { mean: self.mean, stderr, n: self.n }
    }
}

/// Several named means accumulated together.
#[derive(Debug, Clone, Default)]
pub struct MultiAcc {
    accs: Vec<MeanAcc>,
}

impl MultiAcc {
    pub fn new(k: usize) -> Self {
        Self { accs: vec![MeanAcc::default(); k] }
    }

    pub fn push(&mut self, xs: &[f64]) {
        for (a, &x) in self.accs.iter_mut().zip(xs) {
            a.push(x);
        }
    }

    pub fn merge(&mut self, other: &MultiAcc) {
        for (a, b) in self.accs.iter_mut().zip(&other.accs) {
            a.merge(b);
        }
    }

    pub fn get(&self, i: usize) -> &MeanAcc {
        &self.accs[i]
    }
}

/// Reduction state that can absorb one path at a time and be merged.
pub trait Mergeable: Send {
    fn merge_from(&mut self, other: Self);
}

impl Mergeable for MeanAcc {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other);
    }
}

impl Mergeable for MultiAcc {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other);
    }
}

/// Blocks reduced concurrently before their partials are merged; bounds the
/// number of live partial accumulators.
const GROUP: usize = 64;

/// Folds `per_path(acc, i)` over `0..n` in parallel blocks and merges the
/// blocks in order.
pub fn par_fold<A, I, F>(n: usize, init: I, per_path: F) -> A
where
    A: Mergeable,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
{
    let out: std::result::Result<A, std::convert::Infallible> = fold_blocks(n, &init, |acc, i| {
        per_path(acc, i);
        Ok(())
    });
    match out {
        Ok(a) => a,
        Err(e) => match e {},
    }
}

/// Fallible variant of [`par_fold`]; the first error in block order wins.
pub fn try_par_fold<A, I, F>(n: usize, init: I, per_path: F) -> Result<A>
where
    A: Mergeable,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> Result<()> + Sync,
{
    fold_blocks(n, &init, per_path)
}

fn fold_blocks<A, I, F, E>(n: usize, init: &I, per_path: F) -> std::result::Result<A, E>
where
    A: Mergeable,
    E: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) -> std::result::Result<(), E> + Sync,
{
    let blocks = n.div_ceil(BLOCK);
    let mut out = init();
    for group in (0..blocks).step_by(GROUP) {
        let partials: Vec<std::result::Result<A, E>> = (group..(group + GROUP).min(blocks))
            .into_par_iter()
            .map(|b| {
                let mut acc = init();
                for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                    per_path(&mut acc, i)?;
                }
                Ok(acc)
            })
            .collect();
        for p in partials {
            out.merge_from(p?);
        }
    }
    Ok(out)
}

/// Order-preserving parallel map over `0..n`.
pub fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

pub fn try_par_map<T: Send, F: Fn(usize) -> Result<T> + Sync + Send>(n: usize, f: F) -> Result<Vec<T>> {
    (0..n).into_par_iter().map(f).collect()
}

/// Pearson correlation of paired samples.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn estimate_of_constant_has_zero_stderr() {
        let e = Estimate::from_samples(&[2.0; 10]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.stderr, 0.0);
        assert!(e.within(2.0, 3.0));
    }

    #[test]
    fn par_fold_is_order_stable() {
        let f = |acc: &mut MeanAcc, i: usize| acc.push((i as f64).sin());
        let a = par_fold(10_000, MeanAcc::default, f);
        let b = par_fold(10_000, MeanAcc::default, f);
        assert_eq!(a.mean().to_bits(), b.mean().to_bits());
    }

    proptest! {
        #[test]
        fn merge_matches_single_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..200), split in 0usize..200) {
            let split = split.min(xs.len());
            let mut whole = MeanAcc::default();
            xs.iter().for_each(|&x| whole.push(x));
            let mut left = MeanAcc::default();
            xs[..split].iter().for_each(|&x| left.push(x));
            let mut right = MeanAcc::default();
            xs[split..].iter().for_each(|&x| right.push(x));
            left.merge(&right);
            prop_assert!((left.mean() - whole.mean()).abs() < 1e-9);
            prop_assert!((left.variance() - whole.variance()).abs() < 1e-6 * (1.0 + whole.variance()));
        }
    }
}
