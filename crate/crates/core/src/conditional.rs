//! Regression estimators of conditional expectations `E[Y_k | 𝒰_{t_k}]`.
//!
//! The σ-algebra generated by an observed path up to `t_k` is replaced by a
//! finite set of features of the observed prefix; the conditional expectation
//! becomes the per-step least-squares projection onto those features. Fitting
//! only needs per-step cross products, accumulated path by path and merged,
//! so ensembles never have to be held in memory.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shifts::{densities_into, AdaptedDrift, DriftEvaluator, FeedbackLaw};
use crate::stats::{try_par_fold, Mergeable};
use crate::wiener::{DiscretePath, PathPrefix, TimeGrid};

pub trait FeatureMap: Send + Sync + fmt::Debug {
    fn width(&self) -> usize;
    /// Writes the features of `prefix` (observation up to `prefix.step()`).
    fn features(&self, prefix: PathPrefix<'_>, out: &mut [f64]);
    fn name(&self) -> String;
}

/// `{1, x_k, Δx_k, Δx_{k−1}, Δx_{k−2}}` per coordinate plus squares of the
/// non-constant terms. Missing lags are zero.
#[derive(Debug, Clone)]
pub struct DefaultFeatures {
    dim: usize,
    lags: usize,
}

impl DefaultFeatures {
    pub fn new(dim: usize) -> Self {
        Self { dim, lags: 3 }
    }
}

impl FeatureMap for DefaultFeatures {
    fn width(&self) -> usize {
        1 + 2 * self.dim * (1 + self.lags)
    }

    fn features(&self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let k = prefix.step();
        let per = 1 + self.lags;
        out[0] = 1.0;
        for c in 0..self.dim {
            let base = 1 + c * per;
            out[base] = prefix.current()[c];
            for l in 0..self.lags {
                out[base + 1 + l] = if k >= l + 1 { prefix.increment(k - l, c) } else { 0.0 };
            }
        }
        let lin = self.dim * per;
        for i in 0..lin {
            out[1 + lin + i] = out[1 + i] * out[1 + i];
        }
    }

    fn name(&self) -> String {
        "default".into()
    }
}

/// Polynomials of the current value, `{1, x, …, x^degree}` per coordinate,
/// plus `{x_a, x_a², x_a·x_k}` for each anchor index `a` already reached.
#[derive(Debug, Clone)]
pub struct StateFeatures {
    dim: usize,
    degree: usize,
    anchors: Vec<usize>,
}

impl StateFeatures {
    pub fn new(dim: usize, degree: usize, anchors: Vec<usize>) -> Self {
        Self { dim, degree, anchors }
    }
}

impl FeatureMap for StateFeatures {
    fn width(&self) -> usize {
        1 + self.dim * (self.degree + 3 * self.anchors.len())
    }

    fn features(&self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let k = prefix.step();
        let x = prefix.current();
        out[0] = 1.0;
        let mut i = 1;
        for &xc in x.iter().take(self.dim) {
            let mut p = 1.0;
            for _ in 0..self.degree {
                p *= xc;
                out[i] = p;
                i += 1;
            }
        }
        for &a in &self.anchors {
            for (c, &xc) in x.iter().enumerate().take(self.dim) {
                if a <= k {
                    let xa = prefix.row(a)[c];
                    out[i] = xa;
                    out[i + 1] = xa * xa;
                    out[i + 2] = xa * xc;
                } else {
                    out[i..i + 3].fill(0.0);
                }
                i += 3;
            }
        }
    }

    fn name(&self) -> String {
        format!("state(degree={}, anchors={})", self.degree, self.anchors.len())
    }
}

/// Named feature sets selectable from configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    Default,
    Intercept,
    StateLinear,
    StatePoly { degree: usize },
}

impl FeatureSet {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::Default),
            "intercept" => Ok(Self::Intercept),
            "state-linear" => Ok(Self::StateLinear),
            other => {
                if let Some(deg) = other.strip_prefix("state-poly") {
                    let degree = match deg.strip_prefix('-') {
                        None if deg.is_empty() => Some(3),
                        Some(d) => d.parse().ok().filter(|&d: &usize| d >= 1),
                        None => None,
                    };
                    if let Some(degree) = degree {
                        return Ok(Self::StatePoly { degree });
                    }
                }
                Err(Error::Unknown {
                    what: "feature set",
                    name: other.into(),
                    available: Self::names().iter().map(|s| s.to_string()).collect(),
                })
            }
        }
    }

    pub fn names() -> &'static [&'static str] {
        &["default", "intercept", "state-linear", "state-poly-<degree>"]
    }

    /// `anchors` only affect the state feature sets.
    pub fn build(&self, dim: usize, anchors: &[usize]) -> Arc<dyn FeatureMap> {
        match self {
            Self::Default => Arc::new(DefaultFeatures::new(dim)),
            Self::Intercept => Arc::new(StateFeatures::new(dim, 0, Vec::new())),
            Self::StateLinear => Arc::new(StateFeatures::new(dim, 1, anchors.to_vec())),
            Self::StatePoly { degree } => Arc::new(StateFeatures::new(dim, *degree, anchors.to_vec())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Ridge,
    /// Nadaraya–Watson smoother on the current observed value, binned.
    Kernel { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Fit on an independent batch (`train_paths`, default: the evaluation size).
    Independent { train_paths: Option<usize> },
    /// Fit and evaluate on the same paths; faster, biased, flagged in reports.
    SingleBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub features: FeatureSet,
    /// Ridge penalty on non-intercept coefficients; `None` means `1e-8 · n_train`.
    pub ridge: Option<f64>,
    pub split: SplitMode,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Ridge,
            features: FeatureSet::Default,
            ridge: None,
            split: SplitMode::Independent { train_paths: None },
        }
    }
}

impl EstimatorConfig {
    pub fn with_features(mut self, features: FeatureSet) -> Self {
        self.features = features;
        self
    }

    pub fn single_batch(mut self) -> Self {
        self.split = SplitMode::SingleBatch;
        self
    }

    pub fn ridge_for(&self, n_train: usize) -> f64 {
        self.ridge.unwrap_or(1e-8 * n_train as f64)
    }

    pub fn train_paths(&self, n_eval: usize) -> usize {
        match self.split {
            SplitMode::Independent { train_paths } => train_paths.unwrap_or(n_eval),
            SplitMode::SingleBatch => n_eval,
        }
    }

    pub fn is_single_batch(&self) -> bool {
        matches!(self.split, SplitMode::SingleBatch)
    }
}

// ---------------------------------------------------------------------------
// Ridge regression

/// Per-step cross products `ΦᵀΦ`, `ΦᵀY`, `YᵀY` and target sums.
#[derive(Debug, Clone)]
pub struct RidgeStats {
    features: Arc<dyn FeatureMap>,
    m: usize,
    q: usize,
    steps: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    yty: Vec<f64>,
    ysum: Vec<f64>,
    n: usize,
    scratch: Vec<f64>,
}

impl RidgeStats {
    pub fn new(features: Arc<dyn FeatureMap>, steps: usize, q: usize) -> Self {
        let m = features.width();
        Self {
            features,
            m,
            q,
            steps,
            xtx: vec![0.0; steps * m * m],
            xty: vec![0.0; steps * m * q],
            yty: vec![0.0; steps * q],
            ysum: vec![0.0; steps * q],
            n: 0,
            scratch: vec![0.0; m],
        }
    }

    /// Adds one observation at step `prefix.step()`.
    pub fn add(&mut self, prefix: PathPrefix<'_>, target: &[f64]) {
        let k = prefix.step();
        let (m, q) = (self.m, self.q);
        self.features.features(prefix, &mut self.scratch);
        let phi = &self.scratch;
        let xtx = &mut self.xtx[k * m * m..(k + 1) * m * m];
        for i in 0..m {
            let pi = phi[i];
            if pi == 0.0 {
                continue;
            }
            let row = &mut xtx[i * m..i * m + m];
            for j in i..m {
                row[j] += pi * phi[j];
            }
        }
        let xty = &mut self.xty[k * m * q..(k + 1) * m * q];
        for i in 0..m {
            for r in 0..q {
                xty[i * q + r] += phi[i] * target[r];
            }
        }
        for r in 0..q {
            self.yty[k * q + r] += target[r] * target[r];
            self.ysum[k * q + r] += target[r];
        }
    }

    /// Adds a whole path: targets are row-major `steps × q`.
    pub fn add_path(&mut self, observed: &DiscretePath, targets: &[f64]) {
        for k in 0..self.steps {
            self.add(observed.prefix(k), &targets[k * self.q..(k + 1) * self.q]);
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &RidgeStats) {
        for (a, b) in self.xtx.iter_mut().zip(&other.xtx) {
            *a += b;
        }
        for (a, b) in self.xty.iter_mut().zip(&other.xty) {
            *a += b;
        }
        for (a, b) in self.yty.iter_mut().zip(&other.yty) {
            *a += b;
        }
        for (a, b) in self.ysum.iter_mut().zip(&other.ysum) {
            *a += b;
        }
        self.n += other.n;
    }

    fn gram(&self, k: usize) -> DMatrix<f64> {
        let m = self.m;
        let block = &self.xtx[k * m * m..(k + 1) * m * m];
        DMatrix::from_fn(m, m, |i, j| if i <= j { block[i * m + j] } else { block[j * m + i] })
    }

    /// Solves the per-step ridge problems. The intercept (feature 0) is not
    /// penalized.
    pub fn solve(&self, ridge: f64) -> Result<RidgeEstimator> {
        let (m, q) = (self.m, self.q);
        let mut coeffs = vec![0.0; self.steps * m * q];
        let mut stderr = vec![0.0; self.steps * m * q];
        let mut rss = vec![0.0; self.steps * q];
        let mut tss = vec![0.0; self.steps * q];
        let n = self.n as f64;
        for k in 0..self.steps {
            let gram = self.gram(k);
            let mut a = gram.clone();
            for i in 1..m {
                a[(i, i)] += ridge;
            }
            let scale = (0..m).map(|i| a[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            let chol = a.clone().cholesky().ok_or(Error::RankDeficient { step: k })?;
            let l = chol.l_dirty();
            let min_pivot = (0..m).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            if min_pivot <= 1e-13 * scale {
                return Err(Error::RankDeficient { step: k });
            }
            let inv = chol.inverse();
            for r in 0..q {
                let b = DVector::from_fn(m, |i, _| self.xty[k * m * q + i * q + r]);
                let c = chol.solve(&b);
                let fit = c.dot(&(&gram * &c));
                let res = (self.yty[k * q + r] - 2.0 * c.dot(&b) + fit).max(0.0);
                rss[k * q + r] = res;
                let ybar = self.ysum[k * q + r] / n;
                tss[k * q + r] = (self.yty[k * q + r] - n * ybar * ybar).max(0.0);
                let dof = (n - m as f64).max(1.0);
                let sigma2 = res / dof;
                for i in 0..m {
                    coeffs[(k * m + i) * q + r] = c[i];
                    stderr[(k * m + i) * q + r] = (sigma2 * inv[(i, i)]).max(0.0).sqrt();
                }
            }
        }
        Ok(RidgeEstimator {
            features: self.features.clone(),
            m,
            q,
            steps: self.steps,
            coeffs,
            stderr,
            rss,
            tss,
            n: self.n,
            ridge,
        })
    }
}

impl Mergeable for RidgeStats {
    fn merge_from(&mut self, other: Self) {
        self.merge(&other);
    }
}

/// Fitted per-step linear predictor `k ↦ ⟨c_k, φ(k, prefix)⟩`.
#[derive(Debug, Clone)]
pub struct RidgeEstimator {
    features: Arc<dyn FeatureMap>,
    m: usize,
    q: usize,
    steps: usize,
    coeffs: Vec<f64>,
    stderr: Vec<f64>,
    rss: Vec<f64>,
    tss: Vec<f64>,
    n: usize,
    ridge: f64,
}

impl RidgeEstimator {
    pub fn predict(&self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        if self.m <= 32 {
            let mut phi = [0.0; 32];
            self.predict_with(prefix, &mut phi[..self.m], out);
        } else {
            let mut phi = vec![0.0; self.m];
            self.predict_with(prefix, &mut phi, out);
        }
    }

    fn predict_with(&self, prefix: PathPrefix<'_>, phi: &mut [f64], out: &mut [f64]) {
        let k = prefix.step();
        self.features.features(prefix, phi);
        let c = &self.coeffs[k * self.m * self.q..(k + 1) * self.m * self.q];
        for (r, o) in out.iter_mut().enumerate().take(self.q) {
            *o = (0..self.m).map(|i| phi[i] * c[i * self.q + r]).sum();
        }
    }

    pub fn feature_width(&self) -> usize {
        self.m
    }

    pub fn out_dim(&self) -> usize {
        self.q
    }

    pub fn n_steps(&self) -> usize {
        self.steps
    }

    pub fn n_train(&self) -> usize {
        self.n
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn feature_map(&self) -> &Arc<dyn FeatureMap> {
        &self.features
    }

    pub fn coefficient(&self, step: usize, feature: usize, out: usize) -> f64 {
        self.coeffs[(step * self.m + feature) * self.q + out]
    }

    pub fn coefficient_stderr(&self, step: usize, feature: usize, out: usize) -> f64 {
        self.stderr[(step * self.m + feature) * self.q + out]
    }

    /// Coefficients at `step` as an `m × q` row-major slice.
    pub fn step_coefficients(&self, step: usize) -> &[f64] {
        &self.coeffs[step * self.m * self.q..(step + 1) * self.m * self.q]
    }

    /// In-sample mean squared residual at `step`, summed over outputs.
    pub fn residual(&self, step: usize) -> f64 {
        self.rss[step * self.q..(step + 1) * self.q].iter().sum::<f64>() / self.n.max(1) as f64
    }

    /// In-sample `R²` at `step`, pooled over outputs; 1 when targets are constant.
    pub fn r_squared(&self, step: usize) -> f64 {
        let tss: f64 = self.tss[step * self.q..(step + 1) * self.q].iter().sum();
        let rss: f64 = self.rss[step * self.q..(step + 1) * self.q].iter().sum();
        if tss <= 1e-300 {
            1.0
        } else {
            1.0 - rss / tss
        }
    }

    /// `Σ_k residual(k) Δt_k`.
    pub fn integrated_residual(&self, grid: &TimeGrid) -> f64 {
        (0..self.steps).map(|k| self.residual(k) * grid.dt(k)).sum()
    }

    /// CSV of `step,feature_index,value`; with several outputs the feature
    /// index runs over `output · width + feature`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,feature_index,value")?;
        for k in 0..self.steps {
            for r in 0..self.q {
                for i in 0..self.m {
                    writeln!(out, "{k},{},{}", r * self.m + i, self.coefficient(k, i, r))?;
                }
            }
        }
        Ok(())
    }
}

/// Per-step ridge least squares of `targets` on features of `observations`.
///
/// `targets[i]` holds path `i`'s targets, row-major `n_steps × q`.
pub fn fit_conditional(
    targets: &[Vec<f64>],
    observations: &[DiscretePath],
    features: Arc<dyn FeatureMap>,
    ridge: f64,
) -> Result<RidgeEstimator> {
    if targets.len() != observations.len() || observations.is_empty() {
        return Err(Error::LengthMismatch {
            what: "targets",
            expected: observations.len(),
            got: targets.len(),
        });
    }
    let steps = observations[0].n_steps();
    let q = targets[0].len() / steps.max(1);
    if q == 0 || targets.iter().any(|t| t.len() != steps * q) {
        return Err(Error::InvalidArgument("targets must be n_steps × q for every path".into()));
    }
    let stats = try_par_fold(
        observations.len(),
        || RidgeStats::new(features.clone(), steps, q),
        |acc, i| {
            if observations[i].n_steps() != steps {
                return Err(Error::InvalidArgument("observations must share a grid".into()));
            }
            acc.add_path(&observations[i], &targets[i]);
            Ok(())
        },
    )?;
    stats.solve(ridge)
}

// ---------------------------------------------------------------------------
// Kernel regression

/// Binned sums for the Nadaraya–Watson smoother of a scalar observation.
#[derive(Debug, Clone)]
pub struct KernelStats {
    bins: usize,
    q: usize,
    steps: usize,
    half_width: Vec<f64>,
    count: Vec<f64>,
    sum: Vec<f64>,
    moments: Vec<[f64; 2]>,
    n: usize,
}

impl KernelStats {
    pub fn new(grid: &TimeGrid, q: usize, bins: usize) -> Self {
        let steps = grid.n_steps();
        let half_width = (0..steps).map(|k| 6.0 * grid.time(k).max(grid.dt(0)).sqrt() + 1e-9).collect();
        Self {
            bins,
            q,
            steps,
            half_width,
            count: vec![0.0; steps * bins],
            sum: vec![0.0; steps * bins * q],
            moments: vec![[0.0; 2]; steps],
            n: 0,
        }
    }

    fn bin_of(&self, k: usize, x: f64) -> usize {
        let h = self.half_width[k];
        let u = ((x + h) / (2.0 * h) * self.bins as f64).floor();
        u.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    fn center(&self, k: usize, b: usize) -> f64 {
        let h = self.half_width[k];
        -h + (b as f64 + 0.5) * 2.0 * h / self.bins as f64
    }

    pub fn add_path(&mut self, observed: &DiscretePath, targets: &[f64]) {
        for k in 0..self.steps {
            let x = observed.value(k, 0);
            let b = self.bin_of(k, x);
            self.count[k * self.bins + b] += 1.0;
            for r in 0..self.q {
                self.sum[(k * self.bins + b) * self.q + r] += targets[k * self.q + r];
            }
            self.moments[k][0] += x;
            self.moments[k][1] += x * x;
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &KernelStats) {
        for (a, b) in self.count.iter_mut().zip(&other.count) {
            *a += b;
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.moments.iter_mut().zip(&other.moments) {
            a[0] += b[0];
            a[1] += b[1];
        }
        self.n += other.n;
    }

    pub fn solve(&self) -> KernelEstimator {
        let n = self.n.max(1) as f64;
        let mut table = vec![0.0; self.steps * self.bins * self.q];
        for k in 0..self.steps {
            let mean = self.moments[k][0] / n;
            let sd = (self.moments[k][1] / n - mean * mean).max(0.0).sqrt();
            let width = 2.0 * self.half_width[k] / self.bins as f64;
            let bandwidth = (1.06 * sd * n.powf(-0.2)).max(width);
            let total: f64 = (0..self.bins).map(|b| self.count[k * self.bins + b]).sum();
            let global: Vec<f64> = (0..self.q)
                .map(|r| (0..self.bins).map(|b| self.sum[(k * self.bins + b) * self.q + r]).sum::<f64>() / total.max(1.0))
                .collect();
            for b in 0..self.bins {
                let xb = self.center(k, b);
                let mut den = 0.0;
                let mut num = vec![0.0; self.q];
                for b2 in 0..self.bins {
                    let c = self.count[k * self.bins + b2];
                    if c == 0.0 {
                        continue;
                    }
                    let z = (xb - self.center(k, b2)) / bandwidth;
                    if z.abs() > 8.0 {
                        continue;
                    }
                    let w = (-0.5 * z * z).exp();
                    den += w * c;
                    for r in 0..self.q {
                        num[r] += w * self.sum[(k * self.bins + b2) * self.q + r];
                    }
                }
                for r in 0..self.q {
                    table[(k * self.bins + b) * self.q + r] = if den > 1e-12 { num[r] / den } else { global[r] };
                }
            }
        }
        KernelEstimator {
            bins: self.bins,
            q: self.q,
            steps: self.steps,
            half_width: self.half_width.clone(),
            table,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KernelEstimator {
    bins: usize,
    q: usize,
    steps: usize,
    half_width: Vec<f64>,
    table: Vec<f64>,
}

impl KernelEstimator {
    pub fn predict(&self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let k = prefix.step();
        let h = self.half_width[k];
        let pos = (prefix.current()[0] + h) / (2.0 * h) * self.bins as f64 - 0.5;
        let pos = pos.clamp(0.0, (self.bins - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(self.bins - 1);
        let f = pos - lo as f64;
        for (r, o) in out.iter_mut().enumerate().take(self.q) {
            let a = self.table[(k * self.bins + lo) * self.q + r];
            let b = self.table[(k * self.bins + hi) * self.q + r];
            *o = a + f * (b - a);
        }
    }
}

// ---------------------------------------------------------------------------
// Estimator front-end

#[derive(Debug, Clone)]
pub enum FittedEstimator {
    Ridge(RidgeEstimator),
    Kernel(KernelEstimator),
}

impl FittedEstimator {
    /// Prediction of `E[target_k | observed prefix]` for `k = prefix.step()`.
    pub fn predict(&self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        match self {
            Self::Ridge(r) => r.predict(prefix, out),
            Self::Kernel(k) => k.predict(prefix, out),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Ridge(r) => r.q,
            Self::Kernel(k) => k.q,
        }
    }

    pub fn n_steps(&self) -> usize {
        match self {
            Self::Ridge(r) => r.steps,
            Self::Kernel(k) => k.steps,
        }
    }

    pub fn as_ridge(&self) -> Option<&RidgeEstimator> {
        match self {
            Self::Ridge(r) => Some(r),
            Self::Kernel(_) => None,
        }
    }

    /// Predictions along a whole observed path, row-major `n_steps × q`.
    pub fn predict_path(&self, observed: &DiscretePath) -> Vec<f64> {
        let q = self.out_dim();
        let n = observed.n_steps();
        let mut out = vec![0.0; n * q];
        let mut phi = match self {
            Self::Ridge(r) => vec![0.0; r.m],
            Self::Kernel(_) => Vec::new(),
        };
        for k in 0..n {
            let o = &mut out[k * q..(k + 1) * q];
            match self {
                Self::Ridge(r) => r.predict_with(observed.prefix(k), &mut phi, o),
                Self::Kernel(e) => e.predict(observed.prefix(k), o),
            }
        }
        out
    }
}

enum ProjectionStats {
    Ridge(RidgeStats),
    Kernel(KernelStats),
}

impl Mergeable for ProjectionStats {
    fn merge_from(&mut self, other: Self) {
        match (self, other) {
            (Self::Ridge(a), Self::Ridge(b)) => a.merge(&b),
            (Self::Kernel(a), Self::Kernel(b)) => a.merge(&b),
            _ => unreachable!("mixed estimator statistics"),
        }
    }
}

/// Fits the estimator described by `config` from `n_train` streamed samples;
/// `sample(i)` returns path `i`'s observed path and its `n_steps × q` targets.
pub fn fit_streaming<S>(
    config: &EstimatorConfig,
    features: Arc<dyn FeatureMap>,
    grid: &TimeGrid,
    q: usize,
    n_train: usize,
    sample: S,
) -> Result<FittedEstimator>
where
    S: Fn(usize) -> Result<(DiscretePath, Vec<f64>)> + Sync,
{
    if n_train == 0 {
        return Err(Error::InvalidArgument("at least one training path is required".into()));
    }
    let steps = grid.n_steps();
    let init = || match config.kind {
        EstimatorKind::Ridge => ProjectionStats::Ridge(RidgeStats::new(features.clone(), steps, q)),
        EstimatorKind::Kernel { bins } => ProjectionStats::Kernel(KernelStats::new(grid, q, bins.max(2))),
    };
    let stats = try_par_fold(n_train, init, |acc, i| {
        let (obs, targets) = sample(i)?;
        if let ProjectionStats::Kernel(_) = acc {
            if obs.dim() != 1 {
                return Err(Error::InvalidArgument("kernel estimator supports one-dimensional observations".into()));
            }
        }
        match acc {
            ProjectionStats::Ridge(s) => s.add_path(&obs, &targets),
            ProjectionStats::Kernel(s) => s.add_path(&obs, &targets),
        }
        Ok(())
    })?;
    Ok(match stats {
        ProjectionStats::Ridge(s) => FittedEstimator::Ridge(s.solve(config.ridge_for(n_train))?),
        ProjectionStats::Kernel(s) => FittedEstimator::Kernel(s.solve()),
    })
}

/// Estimates `k ↦ E[u̇_k | 𝒰_{t_k}]`: the drift is evaluated on `driving`
/// and projected onto features of `observed`.
pub fn dual_predictable_projection(
    drift: &dyn AdaptedDrift,
    driving: &[DiscretePath],
    observed: &[DiscretePath],
    config: &EstimatorConfig,
) -> Result<FittedEstimator> {
    if driving.len() != observed.len() || driving.is_empty() {
        return Err(Error::LengthMismatch {
            what: "observed paths",
            expected: driving.len(),
            got: observed.len(),
        });
    }
    let grid = driving[0].grid().clone();
    let features = config.features.build(observed[0].dim(), &[]);
    fit_streaming(config, features, &grid, drift.dim(), driving.len(), |i| {
        let mut buf = Vec::new();
        densities_into(drift, &driving[i], &mut buf)?;
        Ok((observed[i].clone(), buf))
    })
}

/// A fitted predictor used as a drift on its argument path:
/// `u̇_k(x) = factor · predict(x[0..=k])`.
#[derive(Debug, Clone)]
pub struct FittedDrift {
    estimator: Arc<FittedEstimator>,
    factor: f64,
    label: String,
}

impl FittedDrift {
    pub fn new(estimator: Arc<FittedEstimator>, factor: f64, label: impl Into<String>) -> Self {
        Self { estimator, factor, label: label.into() }
    }
}

struct FittedEval<'a> {
    drift: &'a FittedDrift,
}

impl DriftEvaluator for FittedEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        self.drift.estimator.predict(prefix, out);
        out.iter_mut().for_each(|x| *x *= self.drift.factor);
    }
}

impl AdaptedDrift for FittedDrift {
    fn dim(&self) -> usize {
        self.estimator.out_dim()
    }
    fn label(&self) -> String {
        self.label.clone()
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        Box::new(FittedEval { drift: self })
    }
    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if grid.n_steps() != self.estimator.n_steps() {
            return Err(Error::LengthMismatch {
                what: "fitted drift steps",
                expected: self.estimator.n_steps(),
                got: grid.n_steps(),
            });
        }
        Ok(())
    }
}

/// A fitted predictor used as a feedback law on the drift's own state.
#[derive(Debug, Clone)]
pub struct PredictorLaw {
    estimator: Arc<FittedEstimator>,
    factor: f64,
}

impl PredictorLaw {
    pub fn new(estimator: Arc<FittedEstimator>, factor: f64) -> Self {
        Self { estimator, factor }
    }

    pub fn estimator(&self) -> &Arc<FittedEstimator> {
        &self.estimator
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl FeedbackLaw for PredictorLaw {
    fn eval(&self, state: PathPrefix<'_>, out: &mut [f64]) {
        self.estimator.predict(state, out);
        out.iter_mut().for_each(|x| *x *= self.factor);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shifts::{AffineTimeDrift, FeedbackDrift, LinearDrift, ShiftMap, apply_shift};
    use crate::stats::Estimate;
    use crate::wiener::{brownian_path, sample_brownian, RngStream};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn state_linear(dim: usize) -> Arc<dyn FeatureMap> {
        FeatureSet::StateLinear.build(dim, &[])
    }

    #[test]
    fn default_feature_layout() {
        let g = TimeGrid::uniform(4).unwrap();
        let p = DiscretePath::from_increments(g, 1, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = DefaultFeatures::new(1);
        let mut out = vec![0.0; f.width()];
        f.features(p.prefix(2), &mut out);
        // 1, x_2, Δ_2, Δ_1, Δ_0(=0), then squares
        assert_eq!(out, vec![1.0, 3.0, 2.0, 1.0, 0.0, 9.0, 4.0, 1.0, 0.0]);
    }

    #[test]
    fn independent_noise_projects_to_sample_mean() {
        let g = TimeGrid::uniform(4).unwrap();
        let obs = sample_brownian(&g, 1, 4000, RngStream::new(1, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let targets: Vec<Vec<f64>> = (0..obs.len())
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let est = fit_conditional(&targets, &obs, state_linear(1), 1e-8).unwrap();
        for k in 1..4 {
            let mean = targets.iter().map(|t| t[k]).sum::<f64>() / obs.len() as f64;
            let slope = est.coefficient(k, 1, 0);
            assert!(slope.abs() < 3.0 * est.coefficient_stderr(k, 1, 0) + 1e-12);
            let intercept = est.coefficient(k, 0, 0);
            assert!((intercept - mean).abs() < 0.05, "{intercept} vs {mean}");
        }
    }

    #[test]
    fn measurable_target_is_reproduced() {
        let g = TimeGrid::uniform(8).unwrap();
        let obs = sample_brownian(&g, 1, 500, RngStream::new(2, 0)).unwrap();
        let targets: Vec<Vec<f64>> = obs.iter().map(|p| (0..8).map(|k| p.value(k, 0)).collect()).collect();
        let est = fit_conditional(&targets, &obs, Arc::new(DefaultFeatures::new(1)), 1e-8).unwrap();
        for k in 1..8 {
            assert!(est.r_squared(k) > 1.0 - 1e-9);
        }
        let mut out = [0.0];
        est.predict(obs[3].prefix(5), &mut out);
        assert!((out[0] - obs[3].value(5, 0)).abs() < 1e-6);
    }

    #[test]
    fn gaussian_slope_matches_cov_over_var() {
        // Observation x = W(t) on a one-step grid would be trivial; use a
        // synthetic pair: target y = 0.6 x + 0.8 ε, x ~ N(0, 1).
        let g = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut obs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            obs.push(DiscretePath::from_increments(g.clone(), 1, &[x, 0.0]).unwrap());
            targets.push(vec![0.0, 0.6 * x + 0.8 * e]);
        }
        let est = fit_conditional(&targets, &obs, state_linear(1), 1e-8).unwrap();
        // cov(y, x) / var(x) = 0.6
        let slope = est.coefficient(1, 1, 0);
        let se = est.coefficient_stderr(1, 1, 0);
        assert!((slope - 0.6).abs() < 3.0 * se, "{slope} ± {se}");
        assert!((se - 0.8 / (n as f64).sqrt()).abs() < 0.1 * se);
    }

    #[test]
    fn two_step_gaussian_conditioning() {
        // d = 2, observe y = W¹ + W², target W¹: E[W¹_t | y_t] = y_t / 2.
        let g = TimeGrid::new(vec![0.0, 0.5, 1.0]).unwrap();
        let n = 20_000;
        let driving = sample_brownian(&g, 2, n, RngStream::new(3, 0)).unwrap();
        let obs: Vec<DiscretePath> = driving
            .iter()
            .map(|w| {
                let incs: Vec<f64> = (0..2).map(|k| w.increment(k, 0) + w.increment(k, 1)).collect();
                DiscretePath::from_increments(g.clone(), 1, &incs).unwrap()
            })
            .collect();
        let targets: Vec<Vec<f64>> = driving.iter().map(|w| vec![w.value(0, 0), w.value(1, 0)]).collect();
        let est = fit_conditional(&targets, &obs, state_linear(1), 1e-8).unwrap();
        let slope = est.coefficient(1, 1, 0);
        assert!((slope - 0.5).abs() < 3.0 * est.coefficient_stderr(1, 1, 0));
    }

    #[test]
    fn rank_deficiency_without_ridge_is_an_error() {
        let g = TimeGrid::uniform(3).unwrap();
        let obs = sample_brownian(&g, 1, 50, RngStream::new(4, 0)).unwrap();
        let targets: Vec<Vec<f64>> = obs.iter().map(|_| vec![1.0; 3]).collect();
        // Every path starts at 0, so only the intercept is identified at step 0.
        let err = fit_conditional(&targets, &obs, Arc::new(DefaultFeatures::new(1)), 0.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { step: 0 }));
        assert!(fit_conditional(&targets, &obs, Arc::new(DefaultFeatures::new(1)), 1e-6).is_ok());
    }

    #[test]
    fn deterministic_drift_projects_to_itself() {
        let g = TimeGrid::uniform(16).unwrap();
        let drift = AffineTimeDrift::constant(vec![0.4]);
        let w = sample_brownian(&g, 1, 300, RngStream::new(5, 0)).unwrap();
        let u = ShiftMap::new(Arc::new(drift.clone()));
        let obs: Vec<DiscretePath> = w.iter().map(|p| apply_shift(&u, p).unwrap()).collect();
        let est = dual_predictable_projection(&drift, &w, &obs, &EstimatorConfig::default()).unwrap();
        for p in &obs {
            assert!(est.predict_path(p).iter().all(|x| (x - 0.4).abs() < 1e-9));
        }
    }

    #[test]
    fn observation_measurable_drift_is_reproduced() {
        let g = TimeGrid::uniform(32).unwrap();
        let drift = FeedbackDrift::ornstein_uhlenbeck(1.0, 1);
        let w = sample_brownian(&g, 1, 1000, RngStream::new(6, 0)).unwrap();
        let u = ShiftMap::new(Arc::new(drift.clone()));
        let obs: Vec<DiscretePath> = w.iter().map(|p| apply_shift(&u, p).unwrap()).collect();
        let est = dual_predictable_projection(&drift, &w, &obs, &EstimatorConfig::default()).unwrap();
        let r = est.as_ridge().unwrap();
        assert!((1..32).all(|k| r.r_squared(k) > 1.0 - 1e-9));
    }

    fn linear_projection_setup(n: usize, seed: u64) -> (Vec<DiscretePath>, Vec<Vec<f64>>, RidgeEstimator) {
        // Observe only the process itself; target the endpoint.
        let g = TimeGrid::uniform(8).unwrap();
        let w = sample_brownian(&g, 1, n, RngStream::new(seed, 0)).unwrap();
        let targets: Vec<Vec<f64>> = w.iter().map(|p| vec![p.endpoint()[0].powi(2); 8]).collect();
        let est = fit_conditional(&targets, &w, Arc::new(DefaultFeatures::new(1)), 1e-8 * n as f64).unwrap();
        (w, targets, est)
    }

    #[test]
    fn tower_property_and_l2_contraction() {
        let (w, targets, est) = linear_projection_setup(5000, 7);
        let fitted = FittedEstimator::Ridge(est);
        for k in [1usize, 4, 7] {
            let preds: Vec<f64> = w.iter().map(|p| fitted.predict_path(p)[k]).collect();
            let ys: Vec<f64> = targets.iter().map(|t| t[k]).collect();
            let diffs: Vec<f64> = preds.iter().zip(&ys).map(|(a, b)| a - b).collect();
            assert!(Estimate::from_samples(&diffs).within(0.0, 4.0));
            let m2p = preds.iter().map(|x| x * x).sum::<f64>() / preds.len() as f64;
            let m2y = ys.iter().map(|x| x * x).sum::<f64>() / ys.len() as f64;
            assert!(m2p <= m2y + 1e-9, "step {k}: {m2p} > {m2y}");
        }
    }

    #[test]
    fn refit_on_predictions_is_idempotent() {
        let (w, _, est) = linear_projection_setup(3000, 8);
        let fitted = FittedEstimator::Ridge(est.clone());
        let preds: Vec<Vec<f64>> = w.iter().map(|p| fitted.predict_path(p)).collect();
        let again = fit_conditional(&preds, &w, est.feature_map().clone(), est.ridge()).unwrap();
        for k in 1..8 {
            for i in 0..est.feature_width() {
                let (a, b) = (est.coefficient(k, i, 0), again.coefficient(k, i, 0));
                assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "k={k} i={i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn kernel_and_ridge_agree_on_linear_conditional_mean() {
        // E[W_1 | W_t] = W_t.
        let g = TimeGrid::uniform(8).unwrap();
        let sample = |i: usize| -> Result<(DiscretePath, Vec<f64>)> {
            let w = brownian_path(&g, 1, RngStream::new(10, i as u64));
            let t = vec![w.endpoint()[0]; 8];
            Ok((w, t))
        };
        let ridge_cfg = EstimatorConfig::default().with_features(FeatureSet::StateLinear);
        let kernel_cfg = EstimatorConfig { kind: EstimatorKind::Kernel { bins: 80 }, ..ridge_cfg.clone() };
        let ridge = fit_streaming(&ridge_cfg, state_linear(1), &g, 1, 20_000, sample).unwrap();
        let kernel = fit_streaming(&kernel_cfg, state_linear(1), &g, 1, 20_000, sample).unwrap();
        let probe = brownian_path(&g, 1, RngStream::new(11, 0));
        let (a, b) = (ridge.predict_path(&probe), kernel.predict_path(&probe));
        for k in 2..8 {
            assert!((a[k] - probe.value(k, 0)).abs() < 0.05);
            assert!((a[k] - b[k]).abs() < 0.15, "k={k}: {} vs {}", a[k], b[k]);
        }
    }

    #[test]
    fn fitted_drift_checks_grid() {
        let (_, _, est) = linear_projection_setup(200, 9);
        let d = FittedDrift::new(Arc::new(FittedEstimator::Ridge(est)), 1.0, "fit");
        assert!(d.check_grid(&TimeGrid::uniform(8).unwrap()).is_ok());
        assert!(d.check_grid(&TimeGrid::uniform(9).unwrap()).is_err());
        let _ = LinearDrift::new(1.0, 1);
    }

    #[test]
    fn coefficient_csv_has_one_row_per_coefficient() {
        let (_, _, est) = linear_projection_setup(200, 12);
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 8 * est.feature_width());
        assert!(text.starts_with("step,feature_index,value\n0,0,"));
    }
}
