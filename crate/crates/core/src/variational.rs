//! Cylindrical functionals, Malliavin gradients and the optimal drift of
//! `inf_u E[f∘(I + u) + ½|u|²_H] = −log E[e^{−f}]`.
//!
//! The optimal drift satisfies `u̇_t = −E[D_t f∘U | ℱ_t]`. It is found by
//! iterating `ξ ↦ −π(D f∘(I + ξ))`, where `π` is the per-step regression of
//! the gradient on features of the shifted state. Each iterate is a feedback
//! drift evaluated on its own state, hence adapted to the driving path.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::conditional::{fit_streaming, EstimatorConfig, FeatureSet, FittedEstimator, PredictorLaw};
use crate::entropy::{invertibility_gap, GapConfig, GapReport};
use crate::error::{Error, Result};
use crate::innovation::{eval_stream, train_stream};
use crate::quadrature::{gauss_hermite, gaussian_expectation};
use crate::shifts::{densities_into, shifted_from_densities, AdaptedDrift, FeedbackDrift, ShiftMap};
use crate::stats::{try_par_fold, try_par_map, Estimate, MeanAcc, MultiAcc};
use crate::wiener::{brownian_path, h_norm_sq_raw, DiscretePath, RngStream, TimeGrid};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// `f(w) = g(w(t_1), …, w(t_m))`; arguments are laid out `t`-major,
/// `args[i·d + c] = w_c(t_i)`.
#[derive(Clone)]
pub struct CylindricalFunctional {
    name: String,
    times: Vec<f64>,
    dim: usize,
    g: ScalarFn,
    gradient: Option<GradientFn>,
    bound: Option<f64>,
    hessian_bound: Option<f64>,
    one_convex: bool,
}

impl fmt::Debug for CylindricalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylindricalFunctional")
            .field("name", &self.name)
            .field("times", &self.times)
            .field("dim", &self.dim)
            .field("bound", &self.bound)
            .field("hessian_bound", &self.hessian_bound)
            .finish()
    }
}

/// Step of the central differences used for checks and for functionals
/// without analytic partials.
pub const FD_STEP: f64 = 1e-5;

impl CylindricalFunctional {
    pub fn new(name: impl Into<String>, times: Vec<f64>, dim: usize, g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            times,
            dim,
            g: Arc::new(g),
            gradient: None,
            bound: None,
            hessian_bound: None,
            one_convex: false,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(grad));
        self
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    /// Declares `‖∇²g‖ ≤ c`; `c < 1` makes `f` 1-convex.
    pub fn with_hessian_bound(mut self, c: f64) -> Self {
        self.hessian_bound = Some(c);
        self.one_convex = c < 1.0;
        self
    }

    /// Validates times, the declared bound and the partials on sample points.
    pub fn finish(self) -> Result<Self> {
        if self.dim == 0 || self.times.is_empty() {
            return Err(Error::InvalidArgument("functional needs a dimension and time points".into()));
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) || self.times[0] <= 0.0 {
            return Err(Error::InvalidArgument("functional times must be positive and increasing".into()));
        }
        let width = self.width();
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut args = vec![0.0; width];
        let mut exact = vec![0.0; width];
        let mut fd = vec![0.0; width];
        for _ in 0..16 {
            let mut prev_t = 0.0;
            for (i, &t) in self.times.iter().enumerate() {
                for c in 0..self.dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let base = if i == 0 { 0.0 } else { args[(i - 1) * self.dim + c] };
                    args[i * self.dim + c] = base + (t - prev_t).sqrt() * z;
                }
                prev_t = t;
            }
            let v = (self.g)(&args);
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{}: non-finite value at {args:?}", self.name)));
            }
            if let Some(b) = self.bound {
                if v.abs() > b * (1.0 + 1e-12) {
                    return Err(Error::InvalidArgument(format!("{}: |g| = {} exceeds declared bound {b}", self.name, v.abs())));
                }
            }
            if let Some(grad) = &self.gradient {
                grad(&args, &mut exact);
                self.finite_difference(&args, &mut fd);
                for j in 0..width {
                    if (exact[j] - fd[j]).abs() > 1e-4 * exact[j].abs().max(1.0) {
                        return Err(Error::InvalidArgument(format!(
                            "{}: partial {j} is {} but finite differences give {}",
                            self.name, exact[j], fd[j]
                        )));
                    }
                }
            }
        }
        if matches!(self.hessian_bound, Some(c) if c >= 1.0) {
            log::warn!("{}: declared Hessian bound is not below 1, the fixed-point map may not contract", self.name);
        }
        Ok(self)
    }

    fn finite_difference(&self, args: &[f64], out: &mut [f64]) {
        let mut x = args.to_vec();
        for j in 0..args.len() {
            x[j] = args[j] + FD_STEP;
            let up = (self.g)(&x);
            x[j] = args[j] - FD_STEP;
            let down = (self.g)(&x);
            x[j] = args[j];
            out[j] = (up - down) / (2.0 * FD_STEP);
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn width(&self) -> usize {
        self.times.len() * self.dim
    }

    pub fn bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn hessian_bound(&self) -> Option<f64> {
        self.hessian_bound
    }

    pub fn is_one_convex(&self) -> bool {
        self.one_convex
    }

    pub fn g(&self, args: &[f64]) -> f64 {
        (self.g)(args)
    }

    pub fn partials(&self, args: &[f64], out: &mut [f64]) {
        match &self.gradient {
            Some(grad) => grad(args, out),
            None => self.finite_difference(args, out),
        }
    }

    /// Grid indices of the time points.
    pub fn indices(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        self.times
            .iter()
            .map(|&t| grid.index_of(t).ok_or(Error::OffGrid(t)))
            .collect()
    }

    fn args(&self, path: &DiscretePath, idx: &[usize], out: &mut [f64]) {
        for (i, &j) in idx.iter().enumerate() {
            for c in 0..self.dim {
                out[i * self.dim + c] = path.value(j, c);
            }
        }
    }

    pub fn eval(&self, path: &DiscretePath) -> Result<f64> {
        let idx = self.indices(path.grid())?;
        let mut args = vec![0.0; self.width()];
        self.args(path, &idx, &mut args);
        Ok(self.g(&args))
    }

    /// `E[h(w(t_1), …, w(t_m))]` under Wiener measure by Gauss–Hermite
    /// quadrature over the independent increments.
    fn wiener_expectation(&self, h: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let d = self.dim;
        let sds: Vec<f64> = self
            .times
            .iter()
            .scan(0.0, |prev, &t| {
                let s = (t - *prev).sqrt();
                *prev = t;
                Some(s)
            })
            .collect();
        let r = gaussian_expectation(self.width(), |z| {
            let mut args = [0.0; 2];
            for (i, sd) in sds.iter().enumerate() {
                for c in 0..d {
                    let base = if i == 0 { 0.0 } else { args[(i - 1) * d + c] };
                    args[i * d + c] = base + sd * z[i * d + c];
                }
            }
            h(&args[..z.len()])
        })?;
        Ok(r.value)
    }

    /// `−log E[e^{−f}]` by quadrature.
    pub fn log_partition(&self) -> Result<f64> {
        Ok(-self.wiener_expectation(|x| (-self.g(x)).exp())?.ln())
    }

    /// `E[f e^{−f}] / E[e^{−f}]`, the mean of `f` under the Gibbs measure.
    pub fn gibbs_mean(&self) -> Result<f64> {
        let z = self.wiener_expectation(|x| (-self.g(x)).exp())?;
        Ok(self.wiener_expectation(|x| self.g(x) * (-self.g(x)).exp())? / z)
    }

    // Library ---------------------------------------------------------------

    pub fn zero(dim: usize) -> Result<Self> {
        Self::new("zero", vec![1.0], dim, |_| 0.0)
            .with_gradient(|_, out| out.fill(0.0))
            .with_bound(0.0)
            .with_hessian_bound(0.0)
            .finish()
    }

    /// `λ|w(1)|²`.
    pub fn quadratic(lambda: f64, dim: usize) -> Result<Self> {
        Self::new(format!("quadratic(lambda={lambda})"), vec![1.0], dim, move |x| {
            lambda * x.iter().map(|v| v * v).sum::<f64>()
        })
        .with_gradient(move |x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = 2.0 * lambda * v;
            }
        })
        .with_hessian_bound(2.0 * lambda.abs())
        .finish()
    }

    /// `λ Σ_c tanh(w_c(1))`, a smooth soft threshold.
    pub fn tanh(lambda: f64, dim: usize) -> Result<Self> {
        Self::new(format!("tanh(lambda={lambda})"), vec![1.0], dim, move |x| {
            lambda * x.iter().map(|v| v.tanh()).sum::<f64>()
        })
        .with_gradient(move |x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = lambda / v.cosh().powi(2);
            }
        })
        .with_bound(lambda.abs() * dim as f64)
        .with_hessian_bound(lambda.abs() * 4.0 / (3.0 * 3f64.sqrt()))
        .finish()
    }

    /// `λ Σ_c x²/(1 + x²)` at `x = w_c(1)`.
    pub fn saturating(lambda: f64, dim: usize) -> Result<Self> {
        Self::new(format!("saturating(lambda={lambda})"), vec![1.0], dim, move |x| {
            lambda * x.iter().map(|v| v * v / (1.0 + v * v)).sum::<f64>()
        })
        .with_gradient(move |x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = lambda * 2.0 * v / (1.0 + v * v).powi(2);
            }
        })
        .with_bound(lambda.abs() * dim as f64)
        .with_hessian_bound(2.0 * lambda.abs())
        .finish()
    }

    /// `λ(w(1) − w(½))²`, one-dimensional.
    pub fn spread(lambda: f64) -> Result<Self> {
        Self::new(format!("spread(lambda={lambda})"), vec![0.5, 1.0], 1, move |x| lambda * (x[1] - x[0]).powi(2))
            .with_gradient(move |x, out| {
                let d = 2.0 * lambda * (x[1] - x[0]);
                out[0] = -d;
                out[1] = d;
            })
            .with_hessian_bound(4.0 * lambda.abs())
            .finish()
    }
}

/// `D_t f` on each grid interval, row-major `n_steps × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MalliavinGradient {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl MalliavinGradient {
    pub fn at(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }
}

fn gradient_into(f: &CylindricalFunctional, idx: &[usize], path: &DiscretePath, args: &mut [f64], partials: &mut [f64], out: &mut Vec<f64>) {
    let d = f.dim;
    let n = path.n_steps();
    f.args(path, idx, args);
    f.partials(args, partials);
    out.clear();
    out.resize(n * d, 0.0);
    let mut acc = vec![0.0; d];
    let mut next = idx.len();
    for k in (0..n).rev() {
        while next > 0 && idx[next - 1] > k {
            next -= 1;
            for c in 0..d {
                acc[c] += partials[next * d + c];
            }
        }
        out[k * d..(k + 1) * d].copy_from_slice(&acc);
    }
}

/// `D_t f = Σ_i ∂_i g · 1_{[0, t_i]}(t)`; on `[t_k, t_{k+1})` the sum runs
/// over `t_i ≥ t_{k+1}`.
pub fn malliavin_gradient(f: &CylindricalFunctional, path: &DiscretePath) -> Result<MalliavinGradient> {
    if path.dim() != f.dim {
        return Err(Error::DimMismatch { expected: f.dim, got: path.dim() });
    }
    let idx = f.indices(path.grid())?;
    let mut args = vec![0.0; f.width()];
    let mut partials = vec![0.0; f.width()];
    let mut values = Vec::new();
    gradient_into(f, &idx, path, &mut args, &mut partials, &mut values);
    Ok(MalliavinGradient { dim: f.dim, values })
}

/// `J(u) = E[½|u|²_H + f∘(I + u)]`.
pub fn objective(f: &CylindricalFunctional, u: &dyn AdaptedDrift, grid: &TimeGrid, n_paths: usize, rng: RngStream) -> Result<Estimate> {
    Ok(objective_parts(f, u, grid, n_paths, rng, None)?.0)
}

/// `(J(u), E[f∘U], J(u) − J(0))` on the evaluation batch, filling
/// `marginal` with `U_0(t_m)` when given.
fn objective_parts(
    f: &CylindricalFunctional,
    u: &dyn AdaptedDrift,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    marginal: Option<&mut Vec<f64>>,
) -> Result<(Estimate, Estimate, Estimate)> {
    if u.dim() != f.dim {
        return Err(Error::DimMismatch { expected: f.dim, got: u.dim() });
    }
    let idx = f.indices(grid)?;
    let d = f.dim;
    let eval = eval_stream(rng);
    let last = *idx.last().expect("at least one time point");
    let rows = try_par_map(n_paths, |i| -> Result<[f64; 4]> {
        let w = brownian_path(grid, d, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(u, &w, &mut dens)?;
        let x = shifted_from_densities(&w, &dens);
        let mut args = vec![0.0; f.width()];
        f.args(&x, &idx, &mut args);
        let fx = f.g(&args);
        f.args(&w, &idx, &mut args);
        let fw = f.g(&args);
        let j = 0.5 * h_norm_sq_raw(grid, d, &dens) + fx;
        Ok([j, fx, j - fw, x.value(last, 0)])
    })?;
    let mut acc = MultiAcc::new(3);
    for r in &rows {
        acc.push(&r[..3]);
    }
    if let Some(m) = marginal {
        m.clear();
        m.extend(rows.iter().map(|r| r[3]));
    }
    Ok((acc.get(0).estimate(), acc.get(1).estimate(), acc.get(2).estimate()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariationalConfig {
    pub estimator: EstimatorConfig,
    pub max_iter: usize,
    /// Stop once the energy norm of the drift change falls below `tol`.
    pub tol: f64,
    /// Paths used to measure drift changes and out-of-sample residuals.
    pub validation_paths: usize,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default().with_features(FeatureSet::StatePoly { degree: 3 }),
            max_iter: 50,
            tol: 1e-6,
            validation_paths: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `(E Σ_k |ξ_{j+1} − ξ_j|² Δt_k)^{1/2}` on validation states.
    pub change: f64,
    pub in_sample_residual: Option<f64>,
    pub out_of_sample_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationalSolution {
    pub functional: String,
    #[serde(skip)]
    pub grid: TimeGrid,
    #[serde(skip)]
    pub drift: Arc<FeedbackDrift>,
    #[serde(skip)]
    pub estimator: Option<Arc<FittedEstimator>>,
    pub objective: Estimate,
    /// `J(0) = E[f]` on the same paths.
    pub zero_drift_objective: Estimate,
    /// Paired `J(u*) − J(0)`.
    pub improvement: Estimate,
    /// `E[f∘U]`.
    pub f_under_shift: Estimate,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    /// Last drift change, the size of `u̇ + π(D f∘U)`.
    pub fixed_point_residual: f64,
    /// First coordinate of `U` at the last time point of `f`, per path.
    #[serde(skip)]
    pub marginal_samples: Vec<f64>,
    pub n_paths: usize,
}

impl VariationalSolution {
    /// Ratios of successive drift changes.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.trace.windows(2).filter(|w| w[0].change > 0.0).map(|w| w[1].change / w[0].change).collect()
    }

    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,change,in_sample_residual,out_of_sample_residual")?;
        for r in &self.trace {
            let ins = r.in_sample_residual.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.iteration, r.change, ins, r.out_of_sample_residual)?;
        }
        Ok(())
    }

    /// Per-step coefficients of the fitted feedback law.
    pub fn write_coefficients_csv<W: Write>(&self, mut out: W) -> Result<()> {
        match self.estimator.as_deref().and_then(FittedEstimator::as_ridge) {
            Some(r) => r.write_csv(out),
            None => {
                writeln!(out, "step,feature_index,value")?;
                Ok(())
            }
        }
    }
}

fn feedback_from(est: Option<Arc<FittedEstimator>>, dim: usize) -> FeedbackDrift {
    match est {
        Some(e) => FeedbackDrift::new(Arc::new(PredictorLaw::new(e, -1.0)), dim, "variational", None),
        None => FeedbackDrift::new(Arc::new(crate::shifts::LinearLaw(0.0)), dim, "variational", None),
    }
}

/// Fixed-point iteration `ξ_{j+1} = −π(D f∘(I + ξ_j))`, `ξ_0 = 0`.
pub fn fixed_point_drift(
    f: &CylindricalFunctional,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &VariationalConfig,
) -> Result<VariationalSolution> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("at least two paths are required".into()));
    }
    let d = f.dim;
    let idx = f.indices(grid)?;
    let anchors: Vec<usize> = idx.iter().copied().filter(|&j| j < grid.n_steps()).collect();
    let features = config.estimator.features.build(d, &anchors);
    let train = train_stream(rng, &config.estimator);
    let n_train = config.estimator.train_paths(n_paths);
    let valid = rng.batch(2);
    let n_valid = config.validation_paths.max(2);
    let mut current: Option<Arc<FittedEstimator>> = None;
    let mut trace = Vec::new();
    let mut increases = 0;
    let mut converged = false;
    for iteration in 1..=config.max_iter.max(1) {
        let shift = ShiftMap::new(Arc::new(feedback_from(current.clone(), d)));
        let sample_state = |stream: RngStream, i: usize| -> Result<(DiscretePath, Vec<f64>)> {
            let w = brownian_path(grid, d, stream.offset(i as u64));
            let x = if current.is_some() { shift.apply(&w)? } else { w };
            let mut grad = Vec::new();
            let mut args = vec![0.0; f.width()];
            let mut partials = vec![0.0; f.width()];
            gradient_into(f, &idx, &x, &mut args, &mut partials, &mut grad);
            Ok((x, grad))
        };
        let next = Arc::new(fit_streaming(&config.estimator, features.clone(), grid, d, n_train, |i| sample_state(train, i))?);
        let acc = try_par_fold(n_valid, || MultiAcc::new(2), |acc, i| {
            let (x, grad) = sample_state(valid, i)?;
            let new = next.predict_path(&x);
            let old = current.as_ref().map(|c| c.predict_path(&x));
            let (mut change, mut resid) = (0.0, 0.0);
            for k in 0..grid.n_steps() {
                let dt = grid.dt(k);
                for c in 0..d {
                    let j = k * d + c;
                    let o = old.as_ref().map_or(0.0, |o| o[j]);
                    change += (new[j] - o).powi(2) * dt;
                    resid += (grad[j] - new[j]).powi(2) * dt;
                }
            }
            acc.push(&[change, resid]);
            Ok(())
        })?;
        let change = acc.get(0).mean().max(0.0).sqrt();
        let record = IterationRecord {
            iteration,
            change,
            in_sample_residual: next.as_ridge().map(|r| r.integrated_residual(grid)),
            out_of_sample_residual: acc.get(1).mean(),
        };
        log::debug!("{}: iteration {iteration}, change {change:.3e}", f.name());
        if let Some(prev) = trace.last().map(|r: &IterationRecord| r.change) {
            increases = if change > prev { increases + 1 } else { 0 };
        }
        trace.push(record);
        current = Some(next);
        if change < config.tol {
            converged = true;
            break;
        }
        if increases >= 5 {
            return Err(Error::Divergence { trace: trace.iter().map(|r| r.change).collect() });
        }
    }
    let drift = Arc::new(feedback_from(current.clone(), d));
    let mut marginal_samples = Vec::new();
    let (objective, f_under_shift, improvement) = objective_parts(f, drift.as_ref(), grid, n_paths, rng, Some(&mut marginal_samples))?;
    let zero_drift_objective = objective_parts(f, &crate::shifts::ZeroDrift::new(d), grid, n_paths, rng, None)?.0;
    Ok(VariationalSolution {
        functional: f.name().to_string(),
        grid: grid.clone(),
        drift,
        estimator: current,
        objective,
        zero_drift_objective,
        improvement,
        f_under_shift,
        fixed_point_residual: trace.last().map_or(0.0, |r| r.change),
        trace,
        converged,
        marginal_samples,
        n_paths,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub objective: Estimate,
    /// `−log E[e^{−f}]`.
    pub log_partition: f64,
    pub method: &'static str,
    /// `J(u*) + log E[e^{−f}]`.
    pub gap: f64,
    pub tolerance: f64,
    pub within_tolerance: bool,
    /// Total variation between the histogram of `U(t_m)` and the Gibbs
    /// marginal of `w(t_m)`; one-dimensional functionals only.
    pub marginal_tv: Option<f64>,
}

/// Compares `J(u*)` with `−log E[e^{−f}]` evaluated by quadrature.
pub fn duality_check(f: &CylindricalFunctional, solution: &VariationalSolution) -> Result<DualityReport> {
    let log_partition = f.log_partition()?;
    let gap = solution.objective.mean - log_partition;
    let tolerance = 3.0 * solution.objective.stderr + 1e-9;
    Ok(DualityReport {
        objective: solution.objective,
        log_partition,
        method: "quadrature",
        gap,
        tolerance,
        within_tolerance: gap.abs() <= tolerance,
        marginal_tv: marginal_tv(f, &solution.marginal_samples)?,
    })
}

/// Variant of [`duality_check`] for functionals beyond two Gaussian
/// coordinates: `E[e^{−f}]` is estimated by Monte Carlo.
pub fn duality_check_mc(f: &CylindricalFunctional, solution: &VariationalSolution, n_paths: usize, rng: RngStream) -> Result<DualityReport> {
    let grid = &solution.grid;
    let idx = f.indices(grid)?;
    let stream = rng.batch(3);
    let acc = try_par_fold(n_paths, MeanAcc::default, |acc, i| {
        let w = brownian_path(grid, f.dim, stream.offset(i as u64));
        let mut args = vec![0.0; f.width()];
        f.args(&w, &idx, &mut args);
        acc.push((-f.g(&args)).exp());
        Ok(())
    })?;
    let z = acc.estimate();
    let log_partition = -z.mean.ln();
    let gap = solution.objective.mean - log_partition;
    let tolerance = 3.0 * solution.objective.stderr.hypot(z.stderr / z.mean);
    Ok(DualityReport {
        objective: solution.objective,
        log_partition,
        method: "monte-carlo",
        gap,
        tolerance,
        within_tolerance: gap.abs() <= tolerance,
        marginal_tv: None,
    })
}

const TV_BINS: usize = 40;

/// Unnormalized Gibbs density of `w(t_m)` for one-dimensional `f` with at
/// most two time points.
fn gibbs_marginal_density(f: &CylindricalFunctional, x: f64, nodes: &(Vec<f64>, Vec<f64>)) -> f64 {
    let t = &f.times;
    let tm = *t.last().unwrap();
    let phi = (-0.5 * x * x / tm).exp() / (2.0 * std::f64::consts::PI * tm).sqrt();
    if t.len() == 1 {
        return phi * (-f.g(&[x])).exp();
    }
    // w(t_1) | w(t_2) = x is N(x t_1/t_2, t_1(t_2 − t_1)/t_2).
    let mean = x * t[0] / t[1];
    let sd = (t[0] * (t[1] - t[0]) / t[1]).sqrt();
    let inner: f64 = nodes.0.iter().zip(&nodes.1).map(|(z, w)| w * (-f.g(&[mean + sd * z, x])).exp()).sum();
    phi * inner
}

fn marginal_tv(f: &CylindricalFunctional, samples: &[f64]) -> Result<Option<f64>> {
    if f.dim != 1 || f.times.len() > 2 || samples.is_empty() {
        return Ok(None);
    }
    let sd = f.times.last().unwrap().sqrt();
    let (lo, hi) = (-5.0 * sd, 5.0 * sd);
    let width = (hi - lo) / TV_BINS as f64;
    let nodes = gauss_hermite(64);
    // Bins 0 and TV_BINS + 1 collect the tails.
    let mut p = vec![0.0; TV_BINS + 2];
    let integrate = |a: f64, b: f64| {
        let m = 40;
        let h = (b - a) / m as f64;
        let mut s = gibbs_marginal_density(f, a, &nodes) + gibbs_marginal_density(f, b, &nodes);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * gibbs_marginal_density(f, a + i as f64 * h, &nodes);
        }
        s * h / 3.0
    };
    p[0] = integrate(-12.0 * sd, lo);
    p[TV_BINS + 1] = integrate(hi, 12.0 * sd);
    for b in 0..TV_BINS {
        p[b + 1] = integrate(lo + b as f64 * width, lo + (b + 1) as f64 * width);
    }
    let total: f64 = p.iter().sum();
    let mut q = vec![0.0; TV_BINS + 2];
    for &x in samples {
        let b = if x < lo {
            0
        } else if x >= hi {
            TV_BINS + 1
        } else {
            1 + (((x - lo) / width) as usize).min(TV_BINS - 1)
        };
        q[b] += 1.0;
    }
    let n = samples.len() as f64;
    Ok(Some(0.5 * p.iter().zip(&q).map(|(a, b)| (a / total - b / n).abs()).sum::<f64>()))
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimizerReport {
    pub gap: GapReport,
    /// `E[f∘U]`.
    pub f_under_shift: Estimate,
    /// `E[f·L]` with `L = e^{−f}/E[e^{−f}]`, by quadrature.
    pub f_under_gibbs: f64,
    /// `E[f∘U] − E[f·L]`.
    pub discrepancy: Estimate,
    pub represents_gibbs: bool,
}

/// Invertibility gap of the fitted `U` plus the Gibbs representability
/// signature `E[f∘U] = E[f·L]`.
pub fn invertibility_of_minimizer(
    f: &CylindricalFunctional,
    solution: &VariationalSolution,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
    gap_config: &GapConfig,
) -> Result<MinimizerReport> {
    let grid = &solution.grid;
    let shift = ShiftMap::new(solution.drift.clone());
    let gap = invertibility_gap(&shift, grid, n_paths, rng, config, gap_config)?;
    let f_under_gibbs = f.gibbs_mean()?;
    let (_, f_under_shift, _) = objective_parts(f, solution.drift.as_ref(), grid, n_paths, rng, None)?;
    let discrepancy = Estimate {
        mean: f_under_shift.mean - f_under_gibbs,
        ..f_under_shift
    };
    Ok(MinimizerReport {
        represents_gibbs: discrepancy.within(0.0, gap_config.z),
        gap,
        f_under_shift,
        f_under_gibbs,
        discrepancy,
    })
}

/// Coefficient `a(t)` of the optimal feedback `u̇_t = a(t)·x` for
/// `f = λ w(1)²`: `∂_x log E[e^{−λ(x+G)²}]`, `G ~ N(0, 1 − t)`, by quadrature
/// and a central difference in `x`, which is exact for the quadratic log.
pub fn quadratic_h_transform_slope(lambda: f64, t: f64) -> Result<f64> {
    let s = (1.0 - t).max(0.0).sqrt();
    let log_h = |x: f64| -> Result<f64> {
        Ok(gaussian_expectation(1, |z| (-lambda * (x + s * z[0]).powi(2)).exp())?.value.ln())
    };
    let (x0, dx) = (0.5, 0.25);
    Ok((log_h(x0 + dx)? - log_h(x0 - dx)?) / (2.0 * dx) / x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shifts::{AffineTimeDrift, ZeroDrift};

    fn path(incs: &[f64]) -> DiscretePath {
        DiscretePath::from_increments(TimeGrid::uniform(incs.len()).unwrap(), 1, incs).unwrap()
    }

    #[test]
    fn gradient_of_linear_endpoint_functional_is_constant() {
        let f = CylindricalFunctional::new("lin", vec![1.0], 1, |x| 3.0 * x[0]).with_gradient(|_, o| o[0] = 3.0).finish().unwrap();
        let g = malliavin_gradient(&f, &path(&[0.1, -0.2, 0.3, 0.4])).unwrap();
        assert_eq!(g.values, vec![3.0; 4]);
    }

    #[test]
    fn gradient_support_stops_at_time_point() {
        let f = CylindricalFunctional::new("sin-half", vec![0.5], 1, |x| x[0].sin()).with_gradient(|x, o| o[0] = x[0].cos()).finish().unwrap();
        let p = path(&[0.1, -0.2, 0.3, 0.4]);
        let g = malliavin_gradient(&f, &p).unwrap();
        let c = (-0.1f64).cos();
        assert_eq!(g.values, vec![c, c, 0.0, 0.0]);
    }

    #[test]
    fn finite_difference_fallback() {
        let f = CylindricalFunctional::new("cube", vec![0.5, 1.0], 1, |x| x[0].powi(3) + x[0] * x[1]).finish().unwrap();
        let p = path(&[0.1, -0.2, 0.3, 0.4]);
        let g = malliavin_gradient(&f, &p).unwrap();
        let (a, b) = (-0.1, 0.6);
        assert!((g.values[0] - (3.0 * a * a + b + a)).abs() < 1e-8);
        assert!((g.values[3] - a).abs() < 1e-8);
    }

    #[test]
    fn wrong_partials_are_rejected() {
        let err = CylindricalFunctional::new("bad", vec![1.0], 1, |x| x[0] * x[0]).with_gradient(|x, o| o[0] = x[0]).finish().unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let err = CylindricalFunctional::new("unbounded", vec![1.0], 1, |x| x[0]).with_bound(0.1).finish().unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn off_grid_time_is_an_error() {
        let f = CylindricalFunctional::new("x", vec![0.3], 1, |x| x[0]).finish().unwrap();
        assert!(matches!(malliavin_gradient(&f, &path(&[0.0; 4])), Err(Error::OffGrid(_))));
    }

    #[test]
    fn directional_identity() {
        // f(w + η) − f(w) = ∫₀¹ ⟨∇f(w + sη), η⟩_H ds with η(t) = t.
        let f = CylindricalFunctional::saturating(0.7, 1).unwrap();
        let g = TimeGrid::uniform(8).unwrap();
        let w = brownian_path(&g, 1, RngStream::new(1, 0));
        let eta: Vec<f64> = (0..=8).map(|j| g.time(j)).collect();
        let shifted = |s: f64| {
            let v: Vec<f64> = w.values().iter().zip(&eta).map(|(a, b)| a + s * b).collect();
            DiscretePath::new(g.clone(), 1, v).unwrap()
        };
        let m = 200;
        let mut integral = 0.0;
        for i in 0..=m {
            let s = i as f64 / m as f64;
            let grad = malliavin_gradient(&f, &shifted(s)).unwrap();
            let inner: f64 = (0..8).map(|k| grad.values[k] * 1.0 * g.dt(k)).sum();
            let wgt = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += wgt * inner;
        }
        integral /= 3.0 * m as f64;
        let lhs = f.eval(&shifted(1.0)).unwrap() - f.eval(&w).unwrap();
        assert!((lhs - integral).abs() < 1e-8, "{lhs} vs {integral}");
    }

    #[test]
    fn objective_examples() {
        let g = TimeGrid::uniform(16).unwrap();
        let rng = RngStream::new(2, 0);
        let zero = CylindricalFunctional::zero(1).unwrap();
        assert_eq!(objective(&zero, &ZeroDrift::new(1), &g, 10, rng).unwrap().mean, 0.0);
        let h = objective(&zero, &AffineTimeDrift::constant(vec![0.6]), &g, 10, rng).unwrap();
        assert!((h.mean - 0.18).abs() < 1e-14);
        let q = CylindricalFunctional::quadratic(0.25, 1).unwrap();
        let j = objective(&q, &ZeroDrift::new(1), &g, 20_000, rng).unwrap();
        assert!(j.within(0.25, 3.0), "{j:?}");
    }

    #[test]
    fn zero_functional_gives_zero_drift_in_one_iteration() {
        let g = TimeGrid::uniform(16).unwrap();
        let f = CylindricalFunctional::zero(1).unwrap();
        let sol = fixed_point_drift(&f, &g, 500, RngStream::new(3, 0), &VariationalConfig::default()).unwrap();
        assert_eq!(sol.trace.len(), 1);
        assert!(sol.converged);
        assert_eq!(sol.objective.mean, 0.0);
        let dual = duality_check(&f, &sol).unwrap();
        assert!(dual.gap.abs() < 1e-12);
    }

    #[test]
    fn log_partition_closed_forms() {
        let q = CylindricalFunctional::quadratic(0.25, 1).unwrap();
        assert!((q.log_partition().unwrap() - 0.5 * 1.5f64.ln()).abs() < 1e-12);
        assert!((q.gibbs_mean().unwrap() - 0.25 / 1.5).abs() < 1e-12);
        // w(1) − w(½) ~ N(0, ½): −log E = ½ log(1 + λ)
        let s = CylindricalFunctional::spread(0.4).unwrap();
        assert!((s.log_partition().unwrap() - 0.5 * 1.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn h_transform_slope_closed_form() {
        for &t in &[0.0, 0.3, 0.9] {
            let a = quadratic_h_transform_slope(0.25, t).unwrap();
            let exact = -0.5 / (1.0 + 0.5 * (1.0 - t));
            assert!((a - exact).abs() < 1e-10, "{t}: {a} vs {exact}");
        }
    }

    #[test]
    fn quadratic_solver_small_run() {
        let g = TimeGrid::uniform(32).unwrap();
        let f = CylindricalFunctional::quadratic(0.25, 1).unwrap();
        let cfg = VariationalConfig {
            estimator: EstimatorConfig::default().with_features(FeatureSet::StateLinear),
            ..Default::default()
        };
        let sol = fixed_point_drift(&f, &g, 5000, RngStream::new(4, 0), &cfg).unwrap();
        assert!(sol.converged, "{:?}", sol.trace);
        let dual = duality_check(&f, &sol).unwrap();
        assert!(dual.gap.abs() < 0.02, "{dual:?}");
        assert!(sol.improvement.mean < 0.0);
        assert!(dual.marginal_tv.unwrap() < 0.1);
    }
}
