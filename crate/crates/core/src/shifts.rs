//! Adapted drifts, shift maps `U = I + u` and Girsanov exponentials.
//!
//! A drift is evaluated step by step: its [`DriftEvaluator`] is handed the
//! prefix `x[0..=k]` of the path it acts on and writes `u̇_k`. It never sees
//! later rows, so every drift built through this interface is
//! nonanticipative. Evaluators may keep state between steps (the feedback
//! drifts integrate their own shifted path), which is why calls must come in
//! order `k = 0, 1, …` on a single path.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::stats::{par_map, try_par_map};
use crate::wiener::{
    brownian_path, h_norm_sq_raw, ito_sum_raw, CameronMartinVector, DiscretePath, PathPrefix, RngStream, TimeGrid,
    WeightedEnsemble,
};

pub trait DriftEvaluator {
    /// Writes `u̇_k` for `k = prefix.step()` into `out` (length `dim`).
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]);
}

pub trait AdaptedDrift: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn label(&self) -> String;

    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_>;

    /// Uniform bound on `|u̇|`, when one is known.
    fn bound(&self) -> Option<f64> {
        None
    }

    /// True when `u̇` does not depend on the path (a Cameron–Martin shift).
    fn is_deterministic(&self) -> bool {
        false
    }

    fn check_grid(&self, _grid: &TimeGrid) -> Result<()> {
        Ok(())
    }
}

pub type Drift = Arc<dyn AdaptedDrift>;

fn check_dims(drift: &dyn AdaptedDrift, path: &DiscretePath) -> Result<()> {
    if drift.dim() != path.dim() {
        return Err(Error::DimMismatch {
            expected: drift.dim(),
            got: path.dim(),
        });
    }
    drift.check_grid(path.grid())
}

/// Fills `buf` with `u̇_k(path)` for every step (row-major `n_steps × d`).
pub(crate) fn densities_into(drift: &dyn AdaptedDrift, path: &DiscretePath, buf: &mut Vec<f64>) -> Result<()> {
    check_dims(drift, path)?;
    let d = path.dim();
    let n = path.n_steps();
    buf.clear();
    buf.resize(n * d, 0.0);
    let mut ev = drift.evaluator();
    for k in 0..n {
        let out = &mut buf[k * d..(k + 1) * d];
        ev.eval(path.prefix(k), out);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteDrift { step: k });
        }
    }
    Ok(())
}

/// The drift densities of `drift` along `path`.
pub fn drift_densities(drift: &dyn AdaptedDrift, path: &DiscretePath) -> Result<CameronMartinVector> {
    let mut buf = Vec::new();
    densities_into(drift, path, &mut buf)?;
    CameronMartinVector::new(path.grid().clone(), path.dim(), buf)
}

pub(crate) fn shifted_from_densities(path: &DiscretePath, dens: &[f64]) -> DiscretePath {
    let d = path.dim();
    let grid = path.grid();
    let mut values = path.values().to_vec();
    let mut acc = vec![0.0; d];
    for k in 0..path.n_steps() {
        let dt = grid.dt(k);
        for c in 0..d {
            acc[c] += dens[k * d + c] * dt;
            values[(k + 1) * d + c] += acc[c];
        }
    }
    DiscretePath::from_raw(grid.clone(), d, values)
}

/// `log ρ(−δu) = −Σ⟨u̇_k, Δx_k⟩ − ½ Σ|u̇_k|²Δt_k`.
pub(crate) fn log_rho_from_densities(path: &DiscretePath, dens: &[f64]) -> f64 {
    -ito_sum_raw(path, dens) - 0.5 * h_norm_sq_raw(path.grid(), path.dim(), dens)
}

/// A shift map `U = I_W + u`.
#[derive(Debug, Clone)]
pub struct ShiftMap {
    pub drift: Drift,
}

impl ShiftMap {
    pub fn new(drift: Drift) -> Self {
        Self { drift }
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Arc::new(ZeroDrift::new(dim)))
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn apply(&self, path: &DiscretePath) -> Result<DiscretePath> {
        apply_shift(self, path)
    }
}

/// A density `L = ρ(−δv)` of exponential-martingale form.
#[derive(Debug, Clone)]
pub struct ExponentialDensity {
    pub drift: Drift,
}

impl ExponentialDensity {
    pub fn new(drift: Drift) -> Self {
        Self { drift }
    }

    pub fn one(dim: usize) -> Self {
        Self::new(Arc::new(ZeroDrift::new(dim)))
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    pub fn log_density(&self, path: &DiscretePath) -> Result<f64> {
        girsanov_exponent(self.drift.as_ref(), path)
    }

    pub fn density(&self, path: &DiscretePath) -> Result<f64> {
        Ok(self.log_density(path)?.exp())
    }
}

/// `U(x)_j = x_j + Σ_{k<j} u̇_k(x) Δt_k`, with `u̇` read off the input path.
pub fn apply_shift(shift: &ShiftMap, path: &DiscretePath) -> Result<DiscretePath> {
    let mut buf = Vec::new();
    densities_into(shift.drift.as_ref(), path, &mut buf)?;
    Ok(shifted_from_densities(path, &buf))
}

/// Log of the Girsanov exponential `ρ(−δu)` along `path`.
pub fn girsanov_exponent(drift: &dyn AdaptedDrift, path: &DiscretePath) -> Result<f64> {
    let mut buf = Vec::new();
    densities_into(drift, path, &mut buf)?;
    Ok(log_rho_from_densities(path, &buf))
}

/// Samples the image measure `Uμ` by shifting Brownian paths.
pub fn pushforward_ensemble(shift: &ShiftMap, grid: &TimeGrid, n_paths: usize, rng: RngStream) -> Result<WeightedEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let dim = shift.dim();
    let paths = try_par_map(n_paths, |i| apply_shift(shift, &brownian_path(grid, dim, rng.offset(i as u64))))?;
    Ok(WeightedEnsemble::unweighted(paths))
}

/// Represents `ν = L·μ` by Brownian paths weighted with `L`.
pub fn weighted_ensemble_from_density(
    density: &ExponentialDensity,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
) -> Result<WeightedEnsemble> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let dim = density.dim();
    let paths = par_map(n_paths, |i| brownian_path(grid, dim, rng.offset(i as u64)));
    let weights = try_par_map(n_paths, |i| density.density(&paths[i]))?;
    WeightedEnsemble::new(paths, weights, true)
}

// ---------------------------------------------------------------------------
// Drift library

#[derive(Debug, Clone)]
pub struct ZeroDrift {
    dim: usize,
}

impl ZeroDrift {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

struct ZeroEval;

impl DriftEvaluator for ZeroEval {
    fn eval(&mut self, _prefix: PathPrefix<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
}

impl AdaptedDrift for ZeroDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        "zero".into()
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(ZeroEval)
    }
    fn bound(&self) -> Option<f64> {
        Some(0.0)
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Deterministic drift `u̇_t = c + slope·t` (per coordinate).
#[derive(Debug, Clone)]
pub struct AffineTimeDrift {
    level: Vec<f64>,
    slope: Vec<f64>,
}

impl AffineTimeDrift {
    pub fn constant(c: Vec<f64>) -> Self {
        let slope = vec![0.0; c.len()];
        Self { level: c, slope }
    }

    pub fn ramp(slope: Vec<f64>) -> Self {
        let level = vec![0.0; slope.len()];
        Self { level, slope }
    }
}

struct AffineEval<'a>(&'a AffineTimeDrift);

impl DriftEvaluator for AffineEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let t = prefix.time();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.0.level[c] + self.0.slope[c] * t;
        }
    }
}

impl AdaptedDrift for AffineTimeDrift {
    fn dim(&self) -> usize {
        self.level.len()
    }
    fn label(&self) -> String {
        if self.slope.iter().all(|&s| s == 0.0) {
            format!("constant{:?}", self.level)
        } else {
            format!("affine{:?}+{:?}t", self.level, self.slope)
        }
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(AffineEval(self))
    }
    fn bound(&self) -> Option<f64> {
        let b = self
            .level
            .iter()
            .zip(&self.slope)
            .map(|(l, s)| (l.abs()).max((l + s).abs()).powi(2))
            .sum::<f64>()
            .sqrt();
        Some(b)
    }
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// `u̇_k = β · x_k`: linear in the current value of the argument path.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    beta: f64,
    dim: usize,
}

impl LinearDrift {
    pub fn new(beta: f64, dim: usize) -> Self {
        Self { beta, dim }
    }
}

struct LinearEval(f64);

impl DriftEvaluator for LinearEval {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(prefix.current()) {
            *o = self.0 * x;
        }
    }
}

impl AdaptedDrift for LinearDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        format!("linear(beta={})", self.beta)
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(LinearEval(self.beta))
    }
}

/// A law `g(state prefix)` for a feedback drift.
pub trait FeedbackLaw: Send + Sync + fmt::Debug {
    fn eval(&self, state: PathPrefix<'_>, out: &mut [f64]);
}

/// `g(x) = gain · x_k`.
#[derive(Debug, Clone)]
pub struct LinearLaw(pub f64);

impl FeedbackLaw for LinearLaw {
    fn eval(&self, state: PathPrefix<'_>, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(state.current()) {
            *o = self.0 * x;
        }
    }
}

/// `g(x) = −c · tanh(x_k)`.
#[derive(Debug, Clone)]
pub struct TanhLaw(pub f64);

impl FeedbackLaw for TanhLaw {
    fn eval(&self, state: PathPrefix<'_>, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(state.current()) {
            *o = -self.0 * x.tanh();
        }
    }
}

/// Drift of the strong solution of `dX = g(X) dt + dx`.
///
/// Evaluated on an argument path `x`, it integrates the state
/// `X_{k+1} = X_k + g_k Δt_k + Δx_k` alongside and returns `g_k = g(X[0..=k])`,
/// so `I + u` maps `x` to the Euler solution `X`. Drifts of this kind are
/// measurable with respect to the filtration of their own image.
#[derive(Debug, Clone)]
pub struct FeedbackDrift {
    law: Arc<dyn FeedbackLaw>,
    dim: usize,
    label: String,
    bound: Option<f64>,
}

impl FeedbackDrift {
    pub fn new(law: Arc<dyn FeedbackLaw>, dim: usize, label: impl Into<String>, bound: Option<f64>) -> Self {
        Self { law, dim, label: label.into(), bound }
    }

    /// Ornstein–Uhlenbeck drift `u̇_t = −α U_t`.
    pub fn ornstein_uhlenbeck(alpha: f64, dim: usize) -> Self {
        Self::new(Arc::new(LinearLaw(-alpha)), dim, format!("ou(alpha={alpha})"), None)
    }

    pub fn tanh(c: f64, dim: usize) -> Self {
        Self::new(Arc::new(TanhLaw(c)), dim, format!("tanh(c={c})"), Some(c.abs() * (dim as f64).sqrt()))
    }

    pub fn law(&self) -> &Arc<dyn FeedbackLaw> {
        &self.law
    }
}

struct FeedbackEval<'a> {
    law: &'a dyn FeedbackLaw,
    dim: usize,
    state: Vec<f64>,
    last: Vec<f64>,
}

impl DriftEvaluator for FeedbackEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let k = prefix.step();
        let d = self.dim;
        if k == 0 {
            self.state.clear();
            self.state.resize(d, 0.0);
        } else {
            debug_assert_eq!(self.state.len(), k * d, "feedback drift evaluated out of order");
            let dt = prefix.grid().dt(k - 1);
            for c in 0..d {
                let next = self.state[(k - 1) * d + c] + self.last[c] * dt + prefix.increment(k, c);
                self.state.push(next);
            }
        }
        self.law.eval(PathPrefix::new(prefix.grid(), d, &self.state), out);
        self.last.copy_from_slice(out);
    }
}

impl AdaptedDrift for FeedbackDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        self.label.clone()
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(FeedbackEval {
            law: self.law.as_ref(),
            dim: self.dim,
            state: Vec::new(),
            last: vec![0.0; self.dim],
        })
    }
    fn bound(&self) -> Option<f64> {
        self.bound
    }
}

/// Truncated Tsirelson drift.
///
/// With breakpoints `τ_j = 2^{j−K}`, `j = 0..K`, the density on
/// `[τ_j, τ_{j+1})` for `j ≥ 1` is the fractional part of
/// `(x(τ_j) − x(τ_{j−1})) / (τ_j − τ_{j−1})`; it is zero before `τ_1`.
#[derive(Debug, Clone)]
pub struct TsirelsonDrift {
    levels: usize,
    dim: usize,
    grid: TimeGrid,
    /// Per grid step, the indices of `(τ_{j−1}, τ_j)` feeding it.
    sources: Vec<Option<(usize, usize)>>,
}

impl TsirelsonDrift {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn breakpoints(levels: usize) -> Vec<f64> {
        (0..=levels).map(|j| 2f64.powi(j as i32 - levels as i32)).collect()
    }
}

pub fn tsirelson_drift(levels: usize, grid: &TimeGrid, dim: usize) -> Result<TsirelsonDrift> {
    if levels == 0 {
        return Err(Error::InvalidArgument("tsirelson levels must be at least 1".into()));
    }
    let taus = TsirelsonDrift::breakpoints(levels);
    let idx = grid.require_points(&taus)?;
    let mut sources = vec![None; grid.n_steps()];
    for j in 1..levels {
        for s in sources.iter_mut().take(idx[j + 1]).skip(idx[j]) {
            *s = Some((idx[j - 1], idx[j]));
        }
    }
    Ok(TsirelsonDrift {
        levels,
        dim,
        grid: grid.clone(),
        sources,
    })
}

struct TsirelsonEval<'a>(&'a TsirelsonDrift);

impl DriftEvaluator for TsirelsonEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        match self.0.sources[prefix.step()] {
            None => out.fill(0.0),
            Some((a, b)) => {
                let span = self.0.grid.time(b) - self.0.grid.time(a);
                let (ra, rb) = (prefix.row(a), prefix.row(b));
                for c in 0..out.len() {
                    let r = (rb[c] - ra[c]) / span;
                    out[c] = r - r.floor();
                }
            }
        }
    }
}

impl AdaptedDrift for TsirelsonDrift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn label(&self) -> String {
        format!("tsirelson(levels={})", self.levels)
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(TsirelsonEval(self))
    }
    fn bound(&self) -> Option<f64> {
        Some((self.dim as f64).sqrt())
    }
    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if grid != &self.grid {
            return Err(Error::InvalidArgument(
                "tsirelson drift evaluated on a grid other than the one it was built for".into(),
            ));
        }
        Ok(())
    }
}

/// `factor · u̇`.
#[derive(Debug, Clone)]
pub struct ScaledDrift {
    inner: Drift,
    factor: f64,
}

impl ScaledDrift {
    pub fn new(inner: Drift, factor: f64) -> Self {
        Self { inner, factor }
    }

    pub fn negated(inner: Drift) -> Self {
        Self::new(inner, -1.0)
    }
}

struct ScaledEval<'a> {
    inner: Box<dyn DriftEvaluator + 'a>,
    factor: f64,
}

impl DriftEvaluator for ScaledEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        self.inner.eval(prefix, out);
        out.iter_mut().for_each(|x| *x *= self.factor);
    }
}

impl AdaptedDrift for ScaledDrift {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn label(&self) -> String {
        format!("{}*{}", self.factor, self.inner.label())
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(ScaledEval {
            inner: self.inner.evaluator(),
            factor: self.factor,
        })
    }
    fn bound(&self) -> Option<f64> {
        self.inner.bound().map(|b| b * self.factor.abs())
    }
    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        self.inner.check_grid(grid)
    }
}

/// Drift of the composition `M = U∘V`: `ṁ_k(x) = v̇_k(x) + u̇_k(V(x))`.
#[derive(Debug, Clone)]
pub struct ComposedDrift {
    outer: Drift,
    inner: Drift,
}

impl ComposedDrift {
    /// `outer ∘ inner`, i.e. `(I + outer) ∘ (I + inner)`.
    pub fn new(outer: Drift, inner: Drift) -> Result<Self> {
        if outer.dim() != inner.dim() {
            return Err(Error::DimMismatch {
                expected: outer.dim(),
                got: inner.dim(),
            });
        }
        Ok(Self { outer, inner })
    }
}

struct ComposedEval<'a> {
    outer: Box<dyn DriftEvaluator + 'a>,
    inner: Box<dyn DriftEvaluator + 'a>,
    dim: usize,
    image: Vec<f64>,
    acc: Vec<f64>,
    inner_last: Vec<f64>,
    scratch: Vec<f64>,
}

impl DriftEvaluator for ComposedEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let k = prefix.step();
        let d = self.dim;
        if k == 0 {
            self.image.clear();
            self.acc.iter_mut().for_each(|a| *a = 0.0);
        } else {
            let dt = prefix.grid().dt(k - 1);
            for c in 0..d {
                self.acc[c] += self.inner_last[c] * dt;
            }
        }
        let row = prefix.current();
        for c in 0..d {
            self.image.push(row[c] + self.acc[c]);
        }
        self.inner.eval(prefix, &mut self.inner_last);
        self.outer.eval(PathPrefix::new(prefix.grid(), d, &self.image), &mut self.scratch);
        for c in 0..d {
            out[c] = self.inner_last[c] + self.scratch[c];
        }
    }
}

impl AdaptedDrift for ComposedDrift {
    fn dim(&self) -> usize {
        self.outer.dim()
    }
    fn label(&self) -> String {
        format!("({})∘({})", self.outer.label(), self.inner.label())
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        let d = self.dim();
        Box::new(ComposedEval {
            outer: self.outer.evaluator(),
            inner: self.inner.evaluator(),
            dim: d,
            image: Vec::new(),
            acc: vec![0.0; d],
            inner_last: vec![0.0; d],
            scratch: vec![0.0; d],
        })
    }
    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        self.outer.check_grid(grid)?;
        self.inner.check_grid(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{par_fold, MeanAcc};
    use crate::wiener::{sample_brownian, ito_sum};

    fn two_step_path() -> DiscretePath {
        let g = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        DiscretePath::from_increments(g, 1, &[0.3, -0.1]).unwrap()
    }

    #[test]
    fn zero_and_constant_shift() {
        let p = two_step_path();
        let id = ShiftMap::identity(1);
        assert_eq!(apply_shift(&id, &p).unwrap(), p);
        let c = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![0.7])));
        let q = apply_shift(&c, &p).unwrap();
        for j in 0..=2 {
            assert!((q.value(j, 0) - p.value(j, 0) - 0.7 * p.grid().time(j)).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_drift_shift_by_hand() {
        let p = two_step_path();
        let u = ShiftMap::new(Arc::new(LinearDrift::new(1.0, 1)));
        let q = apply_shift(&u, &p).unwrap();
        let expect = [0.0, 0.3, 0.35];
        for (j, e) in expect.iter().enumerate() {
            assert!((q.value(j, 0) - e).abs() < 1e-15, "row {j}");
        }
    }

    #[test]
    fn girsanov_exponent_by_hand() {
        let p = two_step_path();
        assert_eq!(girsanov_exponent(&ZeroDrift::new(1), &p).unwrap(), 0.0);
        let e = girsanov_exponent(&AffineTimeDrift::constant(vec![1.0]), &p).unwrap();
        assert!((e + 0.7).abs() < 1e-15);
        assert!((e.exp() - 0.4966).abs() < 1e-4);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let p = two_step_path();
        let u = ShiftMap::new(Arc::new(ZeroDrift::new(2)));
        assert!(matches!(apply_shift(&u, &p), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn non_finite_drift_names_step() {
        let p = two_step_path();
        let u = LinearDrift::new(f64::INFINITY, 1);
        // x_0 = 0 gives inf·0 = NaN at the first step.
        assert!(matches!(girsanov_exponent(&u, &p), Err(Error::NonFiniteDrift { step: 0 })));
    }

    #[test]
    fn cameron_martin_shift_is_undone_to_roundoff() {
        let g = TimeGrid::uniform(64).unwrap();
        let h: Drift = Arc::new(AffineTimeDrift { level: vec![0.3], slope: vec![-1.1] });
        let back = ShiftMap::new(Arc::new(ScaledDrift::negated(h.clone())));
        let fwd = ShiftMap::new(h);
        for w in sample_brownian(&g, 1, 5, RngStream::new(11, 0)).unwrap() {
            let there = apply_shift(&fwd, &w).unwrap();
            let again = apply_shift(&back, &there).unwrap();
            assert!(again.max_abs_diff(&w) < 1e-14);
        }
    }

    #[test]
    fn feedback_drift_maps_to_euler_solution() {
        let g = TimeGrid::uniform(32).unwrap();
        let alpha = 0.8;
        let w = &sample_brownian(&g, 1, 1, RngStream::new(2, 0)).unwrap()[0];
        let u = apply_shift(&ShiftMap::new(Arc::new(FeedbackDrift::ornstein_uhlenbeck(alpha, 1))), w).unwrap();
        let mut x = 0.0;
        for k in 0..32 {
            assert!((u.value(k, 0) - x).abs() < 1e-14);
            x += -alpha * x * g.dt(k) + w.increment(k, 0);
        }
        assert!((u.value(32, 0) - x).abs() < 1e-14);
    }

    #[test]
    fn girsanov_exponent_is_additive_over_intervals() {
        // Splitting the sum at step m gives the log-density of the first part
        // plus that of the remainder.
        let g = TimeGrid::uniform(16).unwrap();
        let w = &sample_brownian(&g, 1, 1, RngStream::new(4, 0)).unwrap()[0];
        let drift = FeedbackDrift::tanh(0.7, 1);
        let dens = drift_densities(&drift, w).unwrap();
        let full = girsanov_exponent(&drift, w).unwrap();
        let m = 7;
        let part = |range: std::ops::Range<usize>| -> f64 {
            range
                .map(|k| {
                    let u = dens.density(k)[0];
                    -u * w.increment(k, 0) - 0.5 * u * u * g.dt(k)
                })
                .sum()
        };
        assert!((full - part(0..m) - part(m..16)).abs() < 1e-13);
    }

    #[test]
    fn tsirelson_range_and_first_level() {
        let g = TimeGrid::uniform(256).unwrap();
        let one = tsirelson_drift(1, &g, 1).unwrap();
        let six = tsirelson_drift(6, &g, 1).unwrap();
        for w in sample_brownian(&g, 1, 20, RngStream::new(5, 0)).unwrap() {
            assert!(drift_densities(&one, &w).unwrap().densities().iter().all(|&x| x == 0.0));
            let d = drift_densities(&six, &w).unwrap();
            assert!(d.densities().iter().all(|&x| (0.0..1.0).contains(&x)));
            // zero before τ_1 = 2^{-5}
            assert!(d.densities()[..8].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tsirelson_reports_missing_breakpoints() {
        let g = TimeGrid::uniform(10).unwrap();
        match tsirelson_drift(3, &g, 1) {
            Err(Error::MissingBreakpoints { missing }) => assert_eq!(missing, vec![0.125, 0.25]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tsirelson_kinetic_energy_in_open_unit_half() {
        let g = TimeGrid::uniform(256).unwrap();
        let drift = tsirelson_drift(6, &g, 1).unwrap();
        let acc = par_fold(4000, MeanAcc::default, |a, i| {
            let w = brownian_path(&g, 1, RngStream::new(9, i as u64));
            a.push(0.5 * drift_densities(&drift, &w).unwrap().h_norm_sq());
        });
        let e = acc.estimate();
        assert!(e.mean > 3.0 * e.stderr && e.mean < 0.5, "{e:?}");
    }

    #[test]
    fn composed_with_inverse_is_identity_for_cameron_martin() {
        let g = TimeGrid::uniform(20).unwrap();
        let h: Drift = Arc::new(AffineTimeDrift::constant(vec![1.5]));
        let m = ComposedDrift::new(Arc::new(ScaledDrift::negated(h.clone())), h).unwrap();
        let w = &sample_brownian(&g, 1, 1, RngStream::new(1, 1)).unwrap()[0];
        let d = drift_densities(&m, w).unwrap();
        assert!(d.densities().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn ito_sum_is_linear_in_integrand() {
        let g = TimeGrid::uniform(8).unwrap();
        let w = &sample_brownian(&g, 1, 1, RngStream::new(3, 3)).unwrap()[0];
        let a: Vec<f64> = (0..8).map(|k| (k as f64).cos()).collect();
        let b: Vec<f64> = (0..8).map(|k| w.value(k, 0)).collect();
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
        let lhs = ito_sum(w, &mix).unwrap();
        let rhs = 2.0 * ito_sum(w, &a).unwrap() - 3.0 * ito_sum(w, &b).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
