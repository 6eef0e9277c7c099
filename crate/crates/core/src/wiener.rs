//! Time grids, discrete Brownian paths and the stochastic sums built on them.
//!
//! Paths live on a grid `0 = t_0 < t_1 < … < t_n = 1` and are stored
//! row-major: row `j` holds the `d` coordinates of the path at `t_j`.
//! Drift densities are piecewise constant on `[t_k, t_{k+1})` and Itô sums
//! use the left endpoint, so a density on interval `k` may only depend on
//! rows `0..=k`.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};

/// Grid points closer than this to a requested time are treated as equal.
pub const TIME_EPS: f64 = 1e-12;

/// Default number of grid steps.
pub const DEFAULT_STEPS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Arc<[f64]>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least two points, got {}",
                times.len()
            )));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first time is {}, not 0", times[0])));
        }
        if *times.last().unwrap() != 1.0 {
            return Err(Error::InvalidGrid(format!(
                "last time is {}, not 1",
                times.last().unwrap()
            )));
        }
        for (k, w) in times.windows(2).enumerate() {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "times not strictly increasing at index {}: {} -> {}",
                    k + 1,
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(Self { times: times.into() })
    }

    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be positive".into()));
        }
        let mut times: Vec<f64> = (0..=n_steps).map(|k| k as f64 / n_steps as f64).collect();
        times[n_steps] = 1.0;
        Self::new(times)
    }

    /// Grid whose breakpoints accumulate geometrically at zero:
    /// `2^{-levels}, 2^{1-levels}, …, 1`, each dyadic level split into
    /// `steps_per_level` equal steps, plus the same number of steps on
    /// `[0, 2^{-levels}]`.
    pub fn geometric(levels: usize, steps_per_level: usize) -> Result<Self> {
        if levels == 0 || steps_per_level == 0 {
            return Err(Error::InvalidGrid(
                "levels and steps_per_level must be positive".into(),
            ));
        }
        let mut times = vec![0.0];
        let mut left = 0.0;
        for k in 0..=levels {
            let right = 2f64.powi(k as i32 - levels as i32);
            for s in 1..=steps_per_level {
                times.push(left + (right - left) * s as f64 / steps_per_level as f64);
            }
            left = right;
        }
        *times.last_mut().unwrap() = 1.0;
        Self::new(times)
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, j: usize) -> f64 {
        self.times[j]
    }

    /// Length of interval `k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let pos = self.times.partition_point(|&s| s < t - TIME_EPS);
        (pos < self.times.len() && (self.times[pos] - t).abs() <= TIME_EPS).then_some(pos)
    }

    /// Checks that every time in `ts` lies on the grid.
    pub fn require_points(&self, ts: &[f64]) -> Result<Vec<usize>> {
        let missing: Vec<f64> = ts.iter().copied().filter(|&t| self.index_of(t).is_none()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingBreakpoints { missing });
        }
        Ok(ts.iter().map(|&t| self.index_of(t).unwrap()).collect())
    }
}

/// Borrowed view of the rows `0..=k` of a path: all a nonanticipative
/// functional is allowed to see at step `k`.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    grid: &'a TimeGrid,
    dim: usize,
    values: &'a [f64],
}

impl<'a> PathPrefix<'a> {
    pub fn new(grid: &'a TimeGrid, dim: usize, values: &'a [f64]) -> Self {
        debug_assert!(dim > 0 && values.len() % dim == 0 && !values.is_empty());
        Self { grid, dim, values }
    }

    /// Index `k` of the newest row.
    pub fn step(&self) -> usize {
        self.values.len() / self.dim - 1
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &'a TimeGrid {
        self.grid
    }

    pub fn time(&self) -> f64 {
        self.grid.time(self.step())
    }

    pub fn row(&self, j: usize) -> &'a [f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn current(&self) -> &'a [f64] {
        self.row(self.step())
    }

    /// Coordinate `c` of the increment `x_j - x_{j-1}`; zero for `j == 0`.
    pub fn increment(&self, j: usize, c: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.values[j * self.dim + c] - self.values[(j - 1) * self.dim + c]
        }
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl DiscretePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("path dimension must be positive".into()));
        }
        let rows = grid.n_steps() + 1;
        if values.len() != rows * dim {
            return Err(Error::LengthMismatch {
                what: "path values",
                expected: rows * dim,
                got: values.len(),
            });
        }
        if values[..dim].iter().any(|&x| x != 0.0) {
            return Err(Error::InvalidArgument("paths must start at the origin".into()));
        }
        Ok(Self { grid, dim, values })
    }

    /// Builds the path from its increments (`n_steps × d`, row-major).
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: &[f64]) -> Result<Self> {
        let n = grid.n_steps();
        if increments.len() != n * dim {
            return Err(Error::LengthMismatch {
                what: "increments",
                expected: n * dim,
                got: increments.len(),
            });
        }
        let mut values = vec![0.0; (n + 1) * dim];
        for k in 0..n {
            for c in 0..dim {
                values[(k + 1) * dim + c] = values[k * dim + c] + increments[k * dim + c];
            }
        }
        Ok(Self { grid, dim, values })
    }

    pub(crate) fn from_raw(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), (grid.n_steps() + 1) * dim);
        Self { grid, dim, values }
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        let len = (grid.n_steps() + 1) * dim;
        Self { grid, dim, values: vec![0.0; len] }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn value(&self, j: usize, c: usize) -> f64 {
        self.values[j * self.dim + c]
    }

    pub fn endpoint(&self) -> &[f64] {
        self.row(self.n_steps())
    }

    /// Coordinate `c` of `x_{k+1} - x_k`.
    pub fn increment(&self, k: usize, c: usize) -> f64 {
        self.values[(k + 1) * self.dim + c] - self.values[k * self.dim + c]
    }

    /// Rows `0..=k`.
    pub fn prefix(&self, k: usize) -> PathPrefix<'_> {
        PathPrefix::new(&self.grid, self.dim, &self.values[..(k + 1) * self.dim])
    }

    pub fn value_at_time(&self, t: f64) -> Result<&[f64]> {
        let j = self.grid.index_of(t).ok_or(Error::OffGrid(t))?;
        Ok(self.row(j))
    }

    pub fn max_abs_diff(&self, other: &DiscretePath) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Piecewise-constant element of the Cameron–Martin space.
#[derive(Debug, Clone, PartialEq)]
pub struct CameronMartinVector {
    grid: TimeGrid,
    dim: usize,
    densities: Vec<f64>,
}

impl CameronMartinVector {
    pub fn new(grid: TimeGrid, dim: usize, densities: Vec<f64>) -> Result<Self> {
        let expected = grid.n_steps() * dim;
        if densities.len() != expected {
            return Err(Error::LengthMismatch {
                what: "densities",
                expected,
                got: densities.len(),
            });
        }
        Ok(Self { grid, dim, densities })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn density(&self, k: usize) -> &[f64] {
        &self.densities[k * self.dim..(k + 1) * self.dim]
    }

    /// `|u|²_H = Σ_k |u̇_k|² Δt_k`.
    pub fn h_norm_sq(&self) -> f64 {
        h_norm_sq_raw(&self.grid, self.dim, &self.densities)
    }

    /// The path `u(t_j) = Σ_{k<j} u̇_k Δt_k`.
    pub fn cumulative(&self) -> DiscretePath {
        let n = self.grid.n_steps();
        let d = self.dim;
        let mut values = vec![0.0; (n + 1) * d];
        for k in 0..n {
            let dt = self.grid.dt(k);
            for c in 0..d {
                values[(k + 1) * d + c] = values[k * d + c] + self.densities[k * d + c] * dt;
            }
        }
        DiscretePath::from_raw(self.grid.clone(), d, values)
    }
}

pub fn h_norm_sq(u: &CameronMartinVector) -> f64 {
    u.h_norm_sq()
}

pub(crate) fn h_norm_sq_raw(grid: &TimeGrid, dim: usize, densities: &[f64]) -> f64 {
    densities
        .chunks_exact(dim)
        .enumerate()
        .map(|(k, row)| row.iter().map(|x| x * x).sum::<f64>() * grid.dt(k))
        .sum()
}

/// Left-endpoint Itô sum `Σ_k ⟨integrand_k, x_{k+1} − x_k⟩`.
pub fn ito_sum(path: &DiscretePath, integrand: &[f64]) -> Result<f64> {
    let expected = path.n_steps() * path.dim();
    if integrand.len() != expected {
        return Err(Error::LengthMismatch {
            what: "integrand",
            expected,
            got: integrand.len(),
        });
    }
    Ok(ito_sum_raw(path, integrand))
}

pub(crate) fn ito_sum_raw(path: &DiscretePath, integrand: &[f64]) -> f64 {
    let d = path.dim();
    let mut acc = 0.0;
    for k in 0..path.n_steps() {
        for c in 0..d {
            acc += integrand[k * d + c] * path.increment(k, c);
        }
    }
    acc
}

/// Identifies one reproducible random stream: path `i` of a batch drawn
/// from `(seed, stream_id)` uses stream `stream_id + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    pub fn offset(&self, i: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: self.stream_id.wrapping_add(i),
        }
    }

    /// A disjoint block of `2^40` streams, used to keep training,
    /// validation and evaluation batches independent.
    pub fn batch(&self, index: u64) -> Self {
        self.offset(index << 40)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// One Brownian path; depends only on `(grid, dim, stream)`.
pub fn brownian_path(grid: &TimeGrid, dim: usize, stream: RngStream) -> DiscretePath {
    let mut rng = stream.rng();
    let n = grid.n_steps();
    let mut values = vec![0.0; (n + 1) * dim];
    for k in 0..n {
        let sd = grid.dt(k).sqrt();
        for c in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            values[(k + 1) * dim + c] = values[k * dim + c] + sd * z;
        }
    }
    DiscretePath::from_raw(grid.clone(), dim, values)
}

pub fn sample_brownian(
    grid: &TimeGrid,
    dim: usize,
    n_paths: usize,
    rng: RngStream,
) -> Result<Vec<DiscretePath>> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    Ok(crate::stats::par_map(n_paths, |i| brownian_path(grid, dim, rng.offset(i as u64))))
}

/// Monte Carlo sample of paths with per-path weights.
#[derive(Debug, Clone)]
pub struct WeightedEnsemble {
    paths: Vec<DiscretePath>,
    weights: Vec<f64>,
    normalized: bool,
}

impl WeightedEnsemble {
    pub fn new(paths: Vec<DiscretePath>, weights: Vec<f64>, normalized: bool) -> Result<Self> {
        if paths.len() != weights.len() {
            return Err(Error::LengthMismatch {
                what: "weights",
                expected: paths.len(),
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative or NaN weight {w}")));
        }
        if let Some(first) = paths.first() {
            if paths.iter().any(|p| p.grid() != first.grid() || p.dim() != first.dim()) {
                return Err(Error::InvalidArgument(
                    "ensemble paths must share grid and dimension".into(),
                ));
            }
        }
        Ok(Self { paths, weights, normalized })
    }

    pub fn unweighted(paths: Vec<DiscretePath>) -> Self {
        let weights = vec![1.0; paths.len()];
        Self { paths, weights, normalized: true }
    }

    pub fn paths(&self) -> &[DiscretePath] {
        &self.paths
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn mean_weight(&self) -> crate::stats::Estimate {
        crate::stats::Estimate::from_samples(&self.weights)
    }

    /// MC estimate of `E[f · weight]`.
    pub fn weighted_mean(&self, f: impl Fn(&DiscretePath) -> f64) -> crate::stats::Estimate {
        let xs: Vec<f64> = self.paths.iter().zip(&self.weights).map(|(p, w)| w * f(p)).collect();
        crate::stats::Estimate::from_samples(&xs)
    }
}

/// Flat little-endian layout: `n_paths`, `n_steps`, `dim` as `u64`, then
/// the `n_steps + 1` grid times, then every path's values row-major.
pub fn write_paths_binary<W: Write>(paths: &[DiscretePath], grid: &TimeGrid, dim: usize, mut out: W) -> Result<()> {
    out.write_all(&(paths.len() as u64).to_le_bytes())?;
    out.write_all(&(grid.n_steps() as u64).to_le_bytes())?;
    out.write_all(&(dim as u64).to_le_bytes())?;
    for t in grid.times() {
        out.write_all(&t.to_le_bytes())?;
    }
    for p in paths {
        if p.grid() != grid || p.dim() != dim {
            return Err(Error::InvalidArgument("path does not match header grid/dim".into()));
        }
        for v in p.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_paths_binary<R: Read>(mut input: R) -> Result<Vec<DiscretePath>> {
    fn u64_of<R: Read>(r: &mut R) -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn f64_of<R: Read>(r: &mut R) -> Result<f64> {
        Ok(f64::from_bits(u64_of(r)?))
    }
    let n_paths = u64_of(&mut input)? as usize;
    let n_steps = u64_of(&mut input)? as usize;
    let dim = u64_of(&mut input)? as usize;
    if n_steps == 0 || dim == 0 {
        return Err(Error::Format(format!("bad header: n_steps={n_steps}, dim={dim}")));
    }
    let times = (0..=n_steps).map(|_| f64_of(&mut input)).collect::<Result<Vec<_>>>()?;
    let grid = TimeGrid::new(times)?;
    let mut paths = Vec::with_capacity(n_paths);
    for _ in 0..n_paths {
        let values = (0..(n_steps + 1) * dim)
            .map(|_| f64_of(&mut input))
            .collect::<Result<Vec<_>>>()?;
        paths.push(DiscretePath::new(grid.clone(), dim, values)?);
    }
    Ok(paths)
}

/// CSV with one row per path per time point: `path_id,t,x_1..x_d`.
pub fn write_paths_csv<W: Write>(paths: &[DiscretePath], mut out: W) -> Result<()> {
    let dim = paths.first().map_or(1, |p| p.dim());
    let mut header = String::from("path_id,t");
    for c in 1..=dim {
        header.push_str(&format!(",x_{c}"));
    }
    writeln!(out, "{header}")?;
    for (i, p) in paths.iter().enumerate() {
        for j in 0..=p.n_steps() {
            write!(out, "{i},{}", p.grid().time(j))?;
            for v in p.row(j) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
