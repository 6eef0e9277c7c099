//! Innovation processes `Z = U − ∫E[u̇_s | 𝒰_s] ds` and their diagnostics.

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conditional::{fit_streaming, EstimatorConfig, FittedDrift, FittedEstimator};
use crate::entropy::{invertibility_gap, GapConfig, GapReport};
use crate::error::{Error, Result};
use crate::shifts::{densities_into, shifted_from_densities, AdaptedDrift, Drift, ScaledDrift, ShiftMap};
use crate::stats::{try_par_fold, try_par_map, Estimate, MeanAcc, MultiAcc};
use crate::wiener::{brownian_path, DiscretePath, RngStream, TimeGrid};

/// Stream of the evaluation batch; path `i` of an estimator run is
/// `eval_stream(rng).offset(i)`. Training uses `batch(1)`.
pub fn eval_stream(rng: RngStream) -> RngStream {
    rng.batch(0)
}

pub(crate) fn train_stream(rng: RngStream, config: &EstimatorConfig) -> RngStream {
    if config.is_single_batch() {
        rng.batch(0)
    } else {
        rng.batch(1)
    }
}

/// The projection `k ↦ E[u̇_k | 𝒰_{t_k}]` of a shift's drift. Deterministic
/// drifts are their own projection and skip the regression.
#[derive(Debug, Clone)]
pub enum ProjectedDrift {
    Exact(Drift),
    Fitted(Arc<FittedEstimator>),
}

impl ProjectedDrift {
    pub fn fit(shift: &ShiftMap, grid: &TimeGrid, n_eval: usize, rng: RngStream, config: &EstimatorConfig) -> Result<Self> {
        if shift.drift.is_deterministic() {
            return Ok(Self::Exact(shift.drift.clone()));
        }
        let dim = shift.dim();
        let stream = train_stream(rng, config);
        let features = config.features.build(dim, &[]);
        let est = fit_streaming(config, features, grid, dim, config.train_paths(n_eval), |i| {
            let w = brownian_path(grid, dim, stream.offset(i as u64));
            let mut dens = Vec::new();
            densities_into(shift.drift.as_ref(), &w, &mut dens)?;
            Ok((shifted_from_densities(&w, &dens), dens))
        })?;
        Ok(Self::Fitted(Arc::new(est)))
    }

    /// Projected drift along one sample; `dens` are the true densities on
    /// the driving path and `observed` its image.
    pub fn project(&self, dens: &[f64], observed: &DiscretePath) -> Vec<f64> {
        match self {
            Self::Exact(_) => dens.to_vec(),
            Self::Fitted(e) => e.predict_path(observed),
        }
    }

    pub fn estimator(&self) -> Option<&Arc<FittedEstimator>> {
        match self {
            Self::Exact(_) => None,
            Self::Fitted(e) => Some(e),
        }
    }

    /// The drift `−Ĥ` of the innovation map `V = I − Ĥ`, acting on observed paths.
    pub fn negated_drift(&self) -> Drift {
        match self {
            Self::Exact(d) => Arc::new(ScaledDrift::negated(d.clone())),
            Self::Fitted(e) => Arc::new(FittedDrift::new(e.clone(), -1.0, "innovation")),
        }
    }
}

/// `Z_j = U_j − Σ_{k<j} proj_k Δt_k`.
pub(crate) fn innovation_path(observed: &DiscretePath, proj: &[f64]) -> DiscretePath {
    let neg: Vec<f64> = proj.iter().map(|x| -x).collect();
    shifted_from_densities(observed, &neg)
}

/// `log l = −Σ⟨proj_k, ΔZ_k⟩ − ½Σ|proj_k|²Δt_k`.
pub(crate) fn log_conditional_exponential(innovation: &DiscretePath, proj: &[f64]) -> f64 {
    crate::shifts::log_rho_from_densities(innovation, proj)
}

#[derive(Debug, Clone, Serialize)]
pub struct InnovationDiagnostics {
    /// Mean quadratic variation `Σ(ΔZ)²` per component.
    pub quadratic_variation: Vec<Estimate>,
    /// Largest `|QV − T|` over components.
    pub qv_error: f64,
    /// `5 / √n_steps`.
    pub qv_tolerance: f64,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    pub ks_sample_size: usize,
    /// Mean of `ζ_k ζ_{k+1}` with `ζ = ΔZ/√Δt`, per path then over paths.
    pub lag1_correlation: Estimate,
    /// Mean of `ζ_k · W(t_k)/√t_k`; zero when `Z` is an `ℱ`-martingale.
    pub driving_correlation: Estimate,
    pub exponential_mean: Estimate,
    pub single_batch: bool,
}

impl InnovationDiagnostics {
    pub fn qv_passes(&self) -> bool {
        self.qv_error <= self.qv_tolerance
    }

    pub fn lag1_passes(&self, z: f64) -> bool {
        self.lag1_correlation.within(0.0, z)
    }

    pub fn exponential_passes(&self, z: f64) -> bool {
        self.exponential_mean.within(1.0, z)
    }
}

#[derive(Debug, Clone)]
pub struct InnovationResult {
    pub driving: Vec<DiscretePath>,
    pub observed: Vec<DiscretePath>,
    pub innovation: Vec<DiscretePath>,
    /// Per path, `n_steps × d` projected drift values.
    pub projected: Vec<Vec<f64>>,
    pub projection: ProjectedDrift,
    pub diagnostics: InnovationDiagnostics,
}

impl InnovationResult {
    pub fn grid(&self) -> &TimeGrid {
        self.observed[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.observed[0].dim()
    }

    /// CSV with one row per path and grid time. The projected drift at the
    /// final time is left empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.write_csv_head(out, usize::MAX)
    }

    /// [`write_csv`](Self::write_csv) restricted to the first `max_paths` paths.
    pub fn write_csv_head<W: Write>(&self, mut out: W, max_paths: usize) -> Result<()> {
        let d = self.dim();
        if d == 1 {
            writeln!(out, "path_id,t,U,Z,projected_drift")?;
        } else {
            let cols: Vec<String> = ["U", "Z", "projected_drift"]
                .iter()
                .flat_map(|n| (0..d).map(move |c| format!("{n}_{c}")))
                .collect();
            writeln!(out, "path_id,t,{}", cols.join(","))?;
        }
        let grid = self.grid();
        for (i, (u, z)) in self.observed.iter().zip(&self.innovation).enumerate().take(max_paths) {
            for j in 0..=grid.n_steps() {
                write!(out, "{i},{}", grid.time(j))?;
                for c in 0..d {
                    write!(out, ",{}", u.value(j, c))?;
                }
                for c in 0..d {
                    write!(out, ",{}", z.value(j, c))?;
                }
                for c in 0..d {
                    if j < grid.n_steps() {
                        write!(out, ",{}", self.projected[i][j * d + c])?;
                    } else {
                        write!(out, ",")?;
                    }
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn diagnostics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.diagnostics)?)
    }
}

/// Computes `Z` for `n_paths` evaluation paths of `U = shift(W)`.
pub fn compute_innovation(
    shift: &ShiftMap,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
) -> Result<InnovationResult> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("innovation needs at least two paths".into()));
    }
    let dim = shift.dim();
    let projection = ProjectedDrift::fit(shift, grid, n_paths, rng, config)?;
    let eval = eval_stream(rng);
    let samples = try_par_map(n_paths, |i| -> Result<_> {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(shift.drift.as_ref(), &w, &mut dens)?;
        let u = shifted_from_densities(&w, &dens);
        let proj = projection.project(&dens, &u);
        let z = innovation_path(&u, &proj);
        Ok((w, u, z, proj))
    })?;
    let mut driving = Vec::with_capacity(n_paths);
    let mut observed = Vec::with_capacity(n_paths);
    let mut innovation = Vec::with_capacity(n_paths);
    let mut projected = Vec::with_capacity(n_paths);
    for (w, u, z, p) in samples {
        driving.push(w);
        observed.push(u);
        innovation.push(z);
        projected.push(p);
    }
    let diagnostics = diagnose(&driving, &innovation, &projected, config.is_single_batch());
    Ok(InnovationResult {
        driving,
        observed,
        innovation,
        projected,
        projection,
        diagnostics,
    })
}

fn diagnose(driving: &[DiscretePath], innovation: &[DiscretePath], projected: &[Vec<f64>], single_batch: bool) -> InnovationDiagnostics {
    let grid = innovation[0].grid();
    let d = innovation[0].dim();
    let n = grid.n_steps();
    let horizon = grid.time(n);
    let mut qv = MultiAcc::new(d);
    let mut lag = MeanAcc::default();
    let mut drv = MeanAcc::default();
    let mut expo = MeanAcc::default();
    let mut qv_row = vec![0.0; d];
    for (i, z) in innovation.iter().enumerate() {
        qv_row.iter_mut().for_each(|x| *x = 0.0);
        let (mut lag_sum, mut lag_n) = (0.0, 0usize);
        let (mut drv_sum, mut drv_n) = (0.0, 0usize);
        for k in 0..n {
            let sd = grid.dt(k).sqrt();
            for c in 0..d {
                let dz = z.increment(k, c);
                qv_row[c] += dz * dz;
                if k + 1 < n {
                    lag_sum += dz / sd * z.increment(k + 1, c) / grid.dt(k + 1).sqrt();
                    lag_n += 1;
                }
                if k > 0 {
                    drv_sum += dz / sd * driving[i].value(k, c) / grid.time(k).sqrt();
                    drv_n += 1;
                }
            }
        }
        qv.push(&qv_row);
        if lag_n > 0 {
            lag.push(lag_sum / lag_n as f64);
        }
        if drv_n > 0 {
            drv.push(drv_sum / drv_n as f64);
        }
        expo.push(log_conditional_exponential(z, &projected[i]).exp());
    }
    let quadratic_variation: Vec<Estimate> = (0..d).map(|c| qv.get(c).estimate()).collect();
    let qv_error = quadratic_variation.iter().map(|e| (e.mean - horizon).abs()).fold(0.0, f64::max);
    let (ks_statistic, ks_pvalue, ks_sample_size) = ks_normal(innovation, 100_000);
    InnovationDiagnostics {
        quadratic_variation,
        qv_error,
        qv_tolerance: 5.0 / (n as f64).sqrt(),
        ks_statistic,
        ks_pvalue,
        ks_sample_size,
        lag1_correlation: lag.estimate(),
        driving_correlation: drv.estimate(),
        exponential_mean: expo.estimate(),
        single_batch,
    }
}

/// Kolmogorov–Smirnov test of pooled normalized increments against N(0,1),
/// using at most `max_samples` increments taken in path order.
fn ks_normal(paths: &[DiscretePath], max_samples: usize) -> (f64, f64, usize) {
    let grid = paths[0].grid();
    let mut xs = Vec::new();
    'outer: for p in paths {
        for k in 0..grid.n_steps() {
            for c in 0..p.dim() {
                if xs.len() >= max_samples {
                    break 'outer;
                }
                xs.push(p.increment(k, c) / grid.dt(k).sqrt());
            }
        }
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let m = xs.len() as f64;
    let mut stat: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = normal.cdf(x);
        stat = stat.max((i as f64 + 1.0) / m - f).max(f - i as f64 / m);
    }
    (stat, kolmogorov_pvalue(stat, xs.len()), xs.len())
}

/// Asymptotic Kolmogorov tail `P(D_n > d)` with the Stephens correction.
fn kolmogorov_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Per-path `exp(−Σ⟨proj, ΔZ⟩ − ½Σ|proj|²Δt)`.
pub fn conditional_girsanov_exponential(result: &InnovationResult) -> Result<Vec<f64>> {
    result
        .innovation
        .iter()
        .zip(&result.projected)
        .enumerate()
        .map(|(k, (z, p))| {
            let v = log_conditional_exponential(z, p).exp();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::InvalidArgument(format!("non-finite conditional exponential on path {k}")))
            }
        })
        .collect()
}

/// `E Σ_k |E[u̇_k | 𝒰_{t_k}] + v̇_k(U)|² Δt_k`.
pub fn representability_residual(
    shift: &ShiftMap,
    v: &dyn AdaptedDrift,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    if v.dim() != shift.dim() {
        return Err(Error::DimMismatch { expected: shift.dim(), got: v.dim() });
    }
    let dim = shift.dim();
    let projection = ProjectedDrift::fit(shift, grid, n_paths, rng, config)?;
    let eval = eval_stream(rng);
    let acc = try_par_fold(n_paths, MeanAcc::default, |acc, i| {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(shift.drift.as_ref(), &w, &mut dens)?;
        let u = shifted_from_densities(&w, &dens);
        let proj = projection.project(&dens, &u);
        let mut vd = Vec::new();
        densities_into(v, &u, &mut vd)?;
        let r: f64 = (0..grid.n_steps())
            .map(|k| (0..dim).map(|c| (proj[k * dim + c] + vd[k * dim + c]).powi(2)).sum::<f64>() * grid.dt(k))
            .sum();
        acc.push(r);
        Ok(())
    })?;
    Ok(acc.estimate())
}

/// Entropy test of the innovation map `V = I − Ĥ` for an observation
/// `y = W + ∫h`: the filtrations of `y` and `Z` agree iff `V` is invertible.
pub fn innovation_conjecture_diagnostic(
    h: &Drift,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
    gap: &GapConfig,
) -> Result<GapReport> {
    let shift = ShiftMap::new(h.clone());
    let projection = ProjectedDrift::fit(&shift, grid, n_paths, rng.batch(2), config)?;
    let v = ShiftMap::new(projection.negated_drift());
    invertibility_gap(&v, grid, n_paths, rng, config, gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditional::FeatureSet;
    use crate::shifts::{AffineTimeDrift, FeedbackDrift, LinearDrift, ZeroDrift};

    fn grid() -> TimeGrid {
        TimeGrid::uniform(64).unwrap()
    }

    #[test]
    fn zero_drift_innovation_is_the_driving_path() {
        let g = grid();
        let res = compute_innovation(&ShiftMap::identity(1), &g, 50, RngStream::new(1, 0), &EstimatorConfig::default()).unwrap();
        for (w, z) in res.driving.iter().zip(&res.innovation) {
            assert_eq!(w.values(), z.values());
        }
        assert!(conditional_girsanov_exponential(&res).unwrap().iter().all(|&l| l == 1.0));
    }

    #[test]
    fn constant_drift_projects_exactly() {
        let g = grid();
        let shift = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![0.7])));
        let res = compute_innovation(&shift, &g, 40, RngStream::new(2, 0), &EstimatorConfig::default()).unwrap();
        assert!(res.projected.iter().flatten().all(|&p| p == 0.7));
        for (w, z) in res.driving.iter().zip(&res.innovation) {
            assert!(w.max_abs_diff(z) < 1e-12);
        }
        // l equals ρ(−δh) evaluated on W.
        let ls = conditional_girsanov_exponential(&res).unwrap();
        for (w, l) in res.driving.iter().zip(ls) {
            let rho = (-0.7 * w.endpoint()[0] - 0.5 * 0.49f64).exp();
            assert!((l - rho).abs() < 1e-12 * rho.max(1.0));
        }
    }

    #[test]
    fn bookkeeping_identity_is_exact() {
        let g = grid();
        let shift = ShiftMap::new(Arc::new(FeedbackDrift::tanh(1.0, 1)));
        let res = compute_innovation(&shift, &g, 200, RngStream::new(3, 0), &EstimatorConfig::default()).unwrap();
        for ((u, z), p) in res.observed.iter().zip(&res.innovation).zip(&res.projected) {
            let mut acc = 0.0;
            assert_eq!(z.value(0, 0), 0.0);
            for j in 1..=g.n_steps() {
                acc += p[j - 1] * g.dt(j - 1);
                assert!((z.value(j, 0) - (u.value(j, 0) - acc)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn observation_measurable_drift_gives_brownian_innovation() {
        let g = TimeGrid::uniform(128).unwrap();
        let shift = ShiftMap::new(Arc::new(FeedbackDrift::ornstein_uhlenbeck(1.0, 1)));
        let res = compute_innovation(&shift, &g, 2000, RngStream::new(4, 0), &EstimatorConfig::default()).unwrap();
        let d = &res.diagnostics;
        assert!(d.qv_passes(), "{d:?}");
        assert!(d.lag1_passes(4.0), "{d:?}");
        assert!(d.exponential_passes(4.0), "{d:?}");
        assert!(d.ks_pvalue > 1e-4, "{d:?}");
    }

    #[test]
    fn representability_of_cameron_martin_pair() {
        let g = grid();
        let shift = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![0.3])));
        let v = AffineTimeDrift::constant(vec![-0.3]);
        let r = representability_residual(&shift, &v, &g, 100, RngStream::new(5, 0), &EstimatorConfig::default()).unwrap();
        assert!(r.mean.abs() < 1e-20);
    }

    #[test]
    fn representability_of_ou_pair_and_positive_control() {
        let g = grid();
        let cfg = EstimatorConfig::default().with_features(FeatureSet::StateLinear);
        let shift = ShiftMap::new(Arc::new(FeedbackDrift::ornstein_uhlenbeck(1.0, 1)));
        let v = LinearDrift::new(1.0, 1);
        let r = representability_residual(&shift, &v, &g, 2000, RngStream::new(6, 0), &cfg).unwrap();
        assert!(r.mean < 1e-8, "{r:?}");
        let ctrl = representability_residual(&shift, &ZeroDrift::new(1), &g, 2000, RngStream::new(6, 0), &cfg).unwrap();
        assert!(ctrl.mean > 0.1, "{ctrl:?}");
    }

    #[test]
    fn csv_layout() {
        let g = TimeGrid::uniform(4).unwrap();
        let res = compute_innovation(&ShiftMap::identity(1), &g, 3, RngStream::new(7, 0), &EstimatorConfig::default()).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path_id,t,U,Z,projected_drift");
        assert_eq!(lines.len(), 1 + 3 * 5);
        assert!(lines[5].ends_with(','));
        assert!(res.diagnostics_json().unwrap().contains("quadratic_variation"));
    }

    #[test]
    fn kolmogorov_tail_values() {
        // P(K > 1.36) ≈ 0.049 for the limiting distribution.
        let p = kolmogorov_pvalue(1.36 / (1e6f64).sqrt(), 1_000_000);
        assert!((p - 0.049).abs() < 0.002, "{p}");
        assert_eq!(kolmogorov_pvalue(0.0, 100), 1.0);
    }
}
