//! Relative entropy, kinetic energy and the invertibility gap.
//!
//! For `U = I + u` with `E[ρ(−δu)] = 1`, the entropy of `Uμ` relative to `μ`
//! equals `½E∫|E[u̇_s | 𝒰_s]|² ds`, while the kinetic energy is
//! `½E∫|u̇_s|² ds`. Their difference is nonnegative and vanishes exactly
//! when `U` is invertible. Both are estimated on the same paths, so the gap
//! carries a paired standard error.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::conditional::EstimatorConfig;
use crate::error::{Error, Result};
use crate::innovation::{eval_stream, ProjectedDrift};
use crate::inverse::solve_inverse_path;
use crate::shifts::{
    densities_into, log_rho_from_densities, shifted_from_densities, AdaptedDrift, Drift, ExponentialDensity, ShiftMap,
};
use crate::sinkhorn::{sinkhorn_divergence, SinkhornConfig};
use crate::stats::{try_par_fold, try_par_map, Estimate, MeanAcc, MultiAcc};
use crate::wiener::{brownian_path, h_norm_sq_raw, DiscretePath, RngStream, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Invertible,
    NonInvertible,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Invertible => "invertible",
            Self::NonInvertible => "non-invertible",
            Self::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GapConfig {
    /// Significance multiplier on the gap's standard error.
    pub z: f64,
    /// Smallest gap counted as non-invertible.
    pub threshold: f64,
    /// Absolute slack for regression bias on exactly invertible shifts.
    pub tolerance: f64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self { z: 3.0, threshold: 0.01, tolerance: 1e-6 }
    }
}

impl GapConfig {
    pub fn verdict(&self, gap: &Estimate) -> Verdict {
        if gap.mean <= self.z * gap.stderr + self.tolerance {
            Verdict::Invertible
        } else if gap.mean >= self.threshold + self.z * gap.stderr {
            Verdict::NonInvertible
        } else {
            Verdict::Inconclusive
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GapReport {
    pub label: String,
    pub kinetic_energy: Estimate,
    pub entropy: Estimate,
    pub gap: Estimate,
    pub verdict: Verdict,
    /// Set when the gap is negative beyond its tolerance.
    pub estimator_warning: Option<String>,
    pub single_batch: bool,
    pub config: GapConfig,
}

/// Paired per-path `½|u|²_H` and `½|proj|²_H` on the evaluation batch.
fn paired_energies(
    shift: &ShiftMap,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
) -> Result<(Estimate, Estimate, Estimate)> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("at least two paths are required".into()));
    }
    let dim = shift.dim();
    let projection = ProjectedDrift::fit(shift, grid, n_paths, rng, config)?;
    let eval = eval_stream(rng);
    let acc = try_par_fold(n_paths, || MultiAcc::new(3), |acc, i| {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(shift.drift.as_ref(), &w, &mut dens)?;
        let kin = 0.5 * h_norm_sq_raw(grid, dim, &dens);
        let ent = match &projection {
            ProjectedDrift::Exact(_) => kin,
            ProjectedDrift::Fitted(e) => 0.5 * h_norm_sq_raw(grid, dim, &e.predict_path(&shifted_from_densities(&w, &dens))),
        };
        acc.push(&[kin, ent, kin - ent]);
        Ok(())
    })?;
    Ok((acc.get(0).estimate(), acc.get(1).estimate(), acc.get(2).estimate()))
}

/// `½E|u|²_H` over Brownian paths.
pub fn kinetic_energy(u: &dyn AdaptedDrift, grid: &TimeGrid, n_paths: usize, rng: RngStream) -> Result<Estimate> {
    let dim = u.dim();
    let eval = eval_stream(rng);
    let acc = try_par_fold(n_paths, MeanAcc::default, |acc, i| {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(u, &w, &mut dens)?;
        acc.push(0.5 * h_norm_sq_raw(grid, dim, &dens));
        Ok(())
    })?;
    Ok(acc.estimate())
}

/// `H(Uμ|μ)` as `½E∫|E[u̇_s | 𝒰_s]|² ds`; assumes `E[ρ(−δu)] = 1`.
pub fn entropy_via_projected_drift(
    shift: &ShiftMap,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    Ok(paired_energies(shift, grid, n_paths, rng, config)?.1)
}

/// `E[L log L]` by weighting Brownian paths.
pub fn entropy_via_density(density: &ExponentialDensity, grid: &TimeGrid, n_paths: usize, rng: RngStream) -> Result<Estimate> {
    let dim = density.dim();
    let eval = eval_stream(rng);
    let acc = try_par_fold(n_paths, MeanAcc::default, |acc, i| {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let log_l = density.log_density(&w)?;
        acc.push(log_l.exp() * log_l);
        Ok(())
    })?;
    Ok(acc.estimate())
}

/// Kinetic energy minus entropy, with a verdict.
pub fn invertibility_gap(
    shift: &ShiftMap,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
    gap_config: &GapConfig,
) -> Result<GapReport> {
    let (kinetic_energy, entropy, gap) = paired_energies(shift, grid, n_paths, rng, config)?;
    let verdict = gap_config.verdict(&gap);
    let floor = -(gap_config.z * gap.stderr + gap_config.tolerance);
    let estimator_warning = (gap.mean < floor).then(|| {
        format!(
            "gap {:.3e} below {:.3e}: entropy estimate exceeds kinetic energy",
            gap.mean, floor
        )
    });
    if let Some(w) = &estimator_warning {
        log::warn!("{}: {w}", shift.drift.label());
    }
    Ok(GapReport {
        label: shift.drift.label(),
        kinetic_energy,
        entropy,
        gap,
        verdict,
        estimator_warning,
        single_batch: config.is_single_batch(),
        config: *gap_config,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub label: String,
    pub kinetic_energy: Estimate,
    pub entropy: Estimate,
    pub gap: Estimate,
    /// `gap + z·stderr + tolerance`; nonnegative when the check passes.
    pub margin: f64,
    pub holds: bool,
}

/// Checks `H(Uμ|μ) ≤ ½E|u|²_H` at the estimator level.
pub fn general_inequality_check(
    u: &Drift,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
    gap_config: &GapConfig,
) -> Result<InequalityReport> {
    let shift = ShiftMap::new(u.clone());
    let (kinetic_energy, entropy, gap) = paired_energies(&shift, grid, n_paths, rng, config)?;
    let margin = gap.mean + gap_config.z * gap.stderr + gap_config.tolerance;
    Ok(InequalityReport {
        label: u.label(),
        kinetic_energy,
        entropy,
        gap,
        margin,
        holds: margin >= 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TalagrandConfig {
    /// Absolute `ε`; `None` means `0.05 ×` the projected variance.
    pub epsilon: Option<f64>,
    /// Paths entering the Sinkhorn clouds.
    pub points: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub z: f64,
}

impl Default for TalagrandConfig {
    fn default() -> Self {
        Self { epsilon: None, points: 500, max_iter: 10_000, tol: 1e-8, z: 3.0 }
    }
}

pub const PROJECTION_DERIVATION: &str = "Coordinates are x_i = (w(t_i) - w(t_{i-1})) / sqrt(t_i - t_{i-1}) with t_0 = 0. \
For paths w, b with w - b absolutely continuous, Cauchy-Schwarz on each interval gives \
|x_i(w) - x_i(b)|^2 <= integral over [t_{i-1}, t_i] of |d/dt (w - b)|^2 dt, so the squared \
Euclidean cost of the projected pair is at most |w - b|_H^2. Every coupling of the path \
measures projects to a coupling of the marginals, hence the projected W2^2 is a lower bound for d_H^2.";

#[derive(Debug, Clone, Serialize)]
pub struct TransportReport {
    /// `2E[L log L]`.
    pub entropy_bound: Estimate,
    /// `E|W − B|²_H` for the coupling `W = B − ∫v̇(W)`.
    pub coupling_cost: Estimate,
    /// Paired `coupling_cost − entropy_bound`.
    pub coupling_minus_bound: Estimate,
    /// Debiased Sinkhorn divergence of the projected marginals.
    pub sinkhorn_lower: f64,
    pub sinkhorn_tolerance: f64,
    pub epsilon: f64,
    pub sinkhorn_iterations: usize,
    pub projection_times: Vec<f64>,
    pub projection_dim: usize,
    pub coupling_matches: bool,
    pub lower_bound_holds: bool,
    pub derivation: String,
}

fn project(path: &DiscretePath, idx: &[usize], out: &mut Vec<f64>) {
    let grid = path.grid();
    let mut prev = 0;
    for &j in idx {
        let sd = (grid.time(j) - grid.time(prev)).sqrt();
        for c in 0..path.dim() {
            out.push((path.value(j, c) - path.value(prev, c)) / sd);
        }
        prev = j;
    }
}

/// Coupling cost, `2E[L log L]` and a projected Sinkhorn lower bound for
/// `ν = L·μ`, `L = ρ(−δv)`.
pub fn talagrand_check(
    density: &ExponentialDensity,
    projection_times: &[f64],
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &TalagrandConfig,
) -> Result<TransportReport> {
    if projection_times.is_empty() {
        return Err(Error::InvalidArgument("at least one projection time is required".into()));
    }
    let idx = grid.require_points(projection_times)?;
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx[0] == 0 {
        return Err(Error::InvalidArgument("projection times must be positive and strictly increasing".into()));
    }
    if n_paths < 2 {
        return Err(Error::InvalidArgument("at least two paths are required".into()));
    }
    let dim = density.dim();
    let v = density.drift.as_ref();
    let eval = eval_stream(rng);
    let points = config.points.min(n_paths);
    let samples = try_par_map(n_paths, |i| -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
        let b = brownian_path(grid, dim, eval.offset(i as u64));
        let (w, dens) = solve_inverse_path(v, &b)?;
        let cost = h_norm_sq_raw(grid, dim, &dens);
        let mut vb = Vec::new();
        densities_into(v, &b, &mut vb)?;
        let log_l = log_rho_from_densities(&b, &vb);
        let ent = 2.0 * log_l.exp() * log_l;
        let (mut px, mut py) = (Vec::new(), Vec::new());
        if i < points {
            project(&w, &idx, &mut px);
            project(&b, &idx, &mut py);
        }
        Ok((cost, ent, px, py))
    })?;
    let mut acc = MultiAcc::new(3);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (cost, ent, px, py) in samples {
        acc.push(&[cost, ent, cost - ent]);
        xs.extend(px);
        ys.extend(py);
    }
    let coupling_cost = acc.get(0).estimate();
    let entropy_bound = acc.get(1).estimate();
    let coupling_minus_bound = acc.get(2).estimate();
    let pdim = idx.len() * dim;
    let variance = {
        let mut m = MeanAcc::default();
        for c in 0..pdim {
            let mut col = MeanAcc::default();
            ys.iter().skip(c).step_by(pdim).for_each(|&y| col.push(y));
            m.push(col.variance());
        }
        m.mean()
    };
    let epsilon = config.epsilon.unwrap_or(0.05 * variance);
    let sk = SinkhornConfig { epsilon, max_iter: config.max_iter, tol: config.tol };
    let div = sinkhorn_divergence(&xs, &ys, pdim, &sk)?;
    let sinkhorn_tolerance = epsilon * pdim as f64 + config.z * entropy_bound.stderr;
    Ok(TransportReport {
        coupling_matches: coupling_minus_bound.within(0.0, config.z),
        lower_bound_holds: div.value <= entropy_bound.mean + sinkhorn_tolerance,
        entropy_bound,
        coupling_cost,
        coupling_minus_bound,
        sinkhorn_lower: div.value,
        sinkhorn_tolerance,
        epsilon,
        sinkhorn_iterations: div.xy.iterations + div.xx.iterations + div.yy.iterations,
        projection_times: projection_times.to_vec(),
        projection_dim: pdim,
        derivation: PROJECTION_DERIVATION.into(),
    })
}

/// A named real functional of a path.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub f: Arc<dyn Fn(&DiscretePath) -> f64 + Send + Sync>,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({})", self.name)
    }
}

impl TestFunction {
    pub fn new(name: impl Into<String>, f: impl Fn(&DiscretePath) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f) }
    }

    /// First coordinate of the endpoint.
    pub fn endpoint() -> Self {
        Self::new("endpoint", |p| p.endpoint()[0])
    }

    pub fn tanh_endpoint() -> Self {
        Self::new("tanh-endpoint", |p| p.endpoint()[0].tanh())
    }

    /// `cos` of the first coordinate at the grid point nearest `½`.
    pub fn cos_midpoint() -> Self {
        Self::new("cos-midpoint", |p| p.value(p.n_steps() / 2, 0).cos())
    }

    /// `tanh` of the running maximum of the first coordinate.
    pub fn tanh_running_max() -> Self {
        Self::new("tanh-max", |p| {
            (0..=p.n_steps()).map(|j| p.value(j, 0)).fold(f64::NEG_INFINITY, f64::max).tanh()
        })
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::endpoint(), Self::tanh_endpoint(), Self::cos_midpoint(), Self::tanh_running_max()]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PreservationDiscrepancy {
    pub function: String,
    /// `E[(f∘M − f)·L]`, paired over the same weighted paths.
    pub discrepancy: Estimate,
    pub preserved: bool,
}

/// `E[f∘M · L] − E[f · L]` for each test function.
pub fn measure_preservation_test(
    m: &ShiftMap,
    density: &ExponentialDensity,
    functions: &[TestFunction],
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
) -> Result<Vec<PreservationDiscrepancy>> {
    if m.dim() != density.dim() {
        return Err(Error::DimMismatch { expected: m.dim(), got: density.dim() });
    }
    let dim = m.dim();
    let eval = eval_stream(rng);
    let k = functions.len();
    let acc = try_par_fold(n_paths, || MultiAcc::new(k), |acc, i| {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let l = density.density(&w)?;
        let mw = m.apply(&w)?;
        let row: Vec<f64> = functions.iter().map(|f| ((f.f)(&mw) - (f.f)(&w)) * l).collect();
        acc.push(&row);
        Ok(())
    })?;
    Ok(functions
        .iter()
        .enumerate()
        .map(|(j, f)| {
            let e = acc.get(j).estimate();
            PreservationDiscrepancy {
                function: f.name.clone(),
                discrepancy: e,
                preserved: e.within(0.0, 4.0),
            }
        })
        .collect())
}
