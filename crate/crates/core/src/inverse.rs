//! The inverse shift as the Euler solution of `dB = −v̇(B) dt + dW`, and
//! residual checks of the invertibility identities.

use serde::Serialize;

use crate::conditional::EstimatorConfig;
use crate::error::{Error, Result};
use crate::innovation::{eval_stream, innovation_path, log_conditional_exponential, ProjectedDrift};
use crate::shifts::{
    densities_into, log_rho_from_densities, shifted_from_densities, AdaptedDrift, Drift, DriftEvaluator, ExponentialDensity,
    ShiftMap,
};
use crate::stats::{try_par_fold, try_par_map, Estimate, MeanAcc, Mergeable};
use crate::wiener::{brownian_path, DiscretePath, PathPrefix, RngStream, TimeGrid};

/// Euler path `B_{k+1} = B_k − v̇_k(B[0..=k]) Δt_k + ΔW_k`, `B_0 = 0`.
/// Also returns the densities `v̇_k(B)`.
pub(crate) fn solve_inverse_path(v: &dyn AdaptedDrift, w: &DiscretePath) -> Result<(DiscretePath, Vec<f64>)> {
    let d = w.dim();
    if v.dim() != d {
        return Err(Error::DimMismatch { expected: v.dim(), got: d });
    }
    v.check_grid(w.grid())?;
    let grid = w.grid();
    let n = grid.n_steps();
    let mut values = vec![0.0; (n + 1) * d];
    let mut dens = vec![0.0; n * d];
    let mut ev = v.evaluator();
    for k in 0..n {
        let out = &mut dens[k * d..(k + 1) * d];
        ev.eval(PathPrefix::new(grid, d, &values[..(k + 1) * d]), out);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteDrift { step: k });
        }
        let dt = grid.dt(k);
        for c in 0..d {
            values[(k + 1) * d + c] = values[k * d + c] - dens[k * d + c] * dt + w.increment(k, c);
        }
    }
    Ok((DiscretePath::from_raw(grid.clone(), d, values), dens))
}

/// Solves the inverse SDE of `I + v` along each driving path.
pub fn solve_inverse_sde(v: &dyn AdaptedDrift, driving: &[DiscretePath]) -> Result<Vec<DiscretePath>> {
    try_par_map(driving.len(), |i| solve_inverse_path(v, &driving[i]).map(|(b, _)| b))
}

/// The Euler inverse of `I + v` as a shift of its driving path: `I + u` maps
/// `w` to `B` with `u̇_k(w) = −v̇_k(B[0..=k])`.
#[derive(Debug, Clone)]
pub struct InverseDrift {
    v: Drift,
}

impl InverseDrift {
    pub fn new(v: Drift) -> Self {
        Self { v }
    }
}

struct InverseEval<'a> {
    v: Box<dyn DriftEvaluator + 'a>,
    dim: usize,
    state: Vec<f64>,
    last: Vec<f64>,
}

impl DriftEvaluator for InverseEval<'_> {
    fn eval(&mut self, prefix: PathPrefix<'_>, out: &mut [f64]) {
        let k = prefix.step();
        let d = self.dim;
        if k == 0 {
            self.state.clear();
            self.state.resize(d, 0.0);
        } else {
            let dt = prefix.grid().dt(k - 1);
            for c in 0..d {
                let next = self.state[(k - 1) * d + c] - self.last[c] * dt + prefix.increment(k, c);
                self.state.push(next);
            }
        }
        self.v.eval(PathPrefix::new(prefix.grid(), d, &self.state), &mut self.last);
        for c in 0..d {
            out[c] = -self.last[c];
        }
    }
}

impl AdaptedDrift for InverseDrift {
    fn dim(&self) -> usize {
        self.v.dim()
    }
    fn label(&self) -> String {
        format!("inverse({})", self.v.label())
    }
    fn evaluator(&self) -> Box<dyn DriftEvaluator + '_> {
        let d = self.v.dim();
        Box::new(InverseEval { v: self.v.evaluator(), dim: d, state: Vec::new(), last: vec![0.0; d] })
    }
    fn bound(&self) -> Option<f64> {
        self.v.bound()
    }
    fn is_deterministic(&self) -> bool {
        self.v.is_deterministic()
    }
    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        self.v.check_grid(grid)
    }
}

/// The forward map of a composition check.
#[derive(Debug, Clone)]
pub enum ForwardMap {
    Shift(ShiftMap),
    /// The Euler inverse of `I + v`.
    InverseOf(Drift),
}

impl ForwardMap {
    pub fn dim(&self) -> usize {
        match self {
            Self::Shift(s) => s.dim(),
            Self::InverseOf(v) => v.dim(),
        }
    }

    pub fn apply(&self, w: &DiscretePath) -> Result<DiscretePath> {
        match self {
            Self::Shift(s) => s.apply(w),
            Self::InverseOf(v) => solve_inverse_path(v.as_ref(), w).map(|(b, _)| b),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CompositionResidual {
    /// Mean over paths of `max_j |V(U(w))_j − w_j|`.
    pub sup_norm: Estimate,
    /// Largest per-path sup residual.
    pub max_sup_norm: f64,
    /// Mean over paths of `Σ_j |V(U(w))_j − w_j|² Δt_{j−1}`.
    pub l2_norm: Estimate,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

#[derive(Default)]
struct ResidualAcc {
    sup: MeanAcc,
    l2: MeanAcc,
    max: f64,
}

impl Mergeable for ResidualAcc {
    fn merge_from(&mut self, other: Self) {
        self.sup.merge(&other.sup);
        self.l2.merge(&other.l2);
        self.max = self.max.max(other.max);
    }
}

/// Residual of `V∘U` against the identity on fresh Brownian paths.
pub fn composition_residual(
    u: &ForwardMap,
    v: &ShiftMap,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
) -> Result<CompositionResidual> {
    if u.dim() != v.dim() {
        return Err(Error::DimMismatch { expected: u.dim(), got: v.dim() });
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let dim = u.dim();
    let eval = eval_stream(rng);
    let per_path = try_par_map(n_paths, |i| -> Result<(f64, f64)> {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let back = v.apply(&u.apply(&w)?)?;
        let mut sup: f64 = 0.0;
        let mut l2 = 0.0;
        for j in 1..=grid.n_steps() {
            let row: f64 = (0..dim).map(|c| (back.value(j, c) - w.value(j, c)).powi(2)).sum();
            sup = sup.max(row.sqrt());
            l2 += row * grid.dt(j - 1);
        }
        Ok((sup, l2))
    })?;
    let acc = crate::stats::par_fold(n_paths, ResidualAcc::default, |acc, i| {
        let (s, l) = per_path[i];
        acc.sup.push(s);
        acc.l2.push(l);
        acc.max = acc.max.max(s);
    });
    Ok(CompositionResidual {
        sup_norm: acc.sup.estimate(),
        max_sup_norm: acc.max,
        l2_norm: acc.l2.estimate(),
        per_path: per_path.into_iter().map(|(s, _)| s).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityDeviation {
    pub mean: Estimate,
    pub max: f64,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

/// Per path `|log L(U(w)) + log ρ(−δu)(w)|`.
pub fn invertibility_identity_check(
    u: &ShiftMap,
    density: &ExponentialDensity,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
) -> Result<IdentityDeviation> {
    if u.dim() != density.dim() {
        return Err(Error::DimMismatch { expected: u.dim(), got: density.dim() });
    }
    let dim = u.dim();
    let eval = eval_stream(rng);
    let per_path = try_par_map(n_paths, |i| -> Result<f64> {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(u.drift.as_ref(), &w, &mut dens)?;
        let x = shifted_from_densities(&w, &dens);
        Ok((density.log_density(&x)? + log_rho_from_densities(&w, &dens)).abs())
    })?;
    Ok(IdentityDeviation {
        mean: Estimate::from_samples(&per_path),
        max: per_path.iter().cloned().fold(0.0, f64::max),
        per_path,
    })
}

/// Estimates `E[ρ(−δu) / l] − 1`, where `l` is the innovation exponential
/// standing in for `E[ρ(−δu) | 𝒰]`; zero when `l` is that conditional
/// expectation.
pub fn radon_nikodym_identity_check(
    u: &ShiftMap,
    grid: &TimeGrid,
    n_paths: usize,
    rng: RngStream,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    let dim = u.dim();
    let projection = ProjectedDrift::fit(u, grid, n_paths, rng, config)?;
    let eval = eval_stream(rng);
    let acc = try_par_fold(n_paths, MeanAcc::default, |acc, i| {
        let w = brownian_path(grid, dim, eval.offset(i as u64));
        let mut dens = Vec::new();
        densities_into(u.drift.as_ref(), &w, &mut dens)?;
        let x = shifted_from_densities(&w, &dens);
        let proj = projection.project(&dens, &x);
        let z = innovation_path(&x, &proj);
        let log_ratio = log_rho_from_densities(&w, &dens) - log_conditional_exponential(&z, &proj);
        acc.push(log_ratio.exp() - 1.0);
        Ok(())
    })?;
    Ok(acc.estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shifts::{AffineTimeDrift, ComposedDrift, FeedbackDrift, LinearDrift, ZeroDrift};
    use crate::wiener::sample_brownian;
    use std::sync::Arc;

    #[test]
    fn zero_drift_inverse_is_identity() {
        let g = TimeGrid::uniform(32).unwrap();
        let w = sample_brownian(&g, 2, 5, RngStream::new(1, 0)).unwrap();
        let b = solve_inverse_sde(&ZeroDrift::new(2), &w).unwrap();
        for (x, y) in w.iter().zip(&b) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn constant_drift_inverse_is_exact() {
        let g = TimeGrid::uniform(32).unwrap();
        let w = sample_brownian(&g, 1, 5, RngStream::new(2, 0)).unwrap();
        let b = solve_inverse_sde(&AffineTimeDrift::constant(vec![0.6]), &w).unwrap();
        for (x, y) in w.iter().zip(&b) {
            for j in 0..=32 {
                assert!((y.value(j, 0) - (x.value(j, 0) - 0.6 * g.time(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_inverse_matches_feedback_shift() {
        let g = TimeGrid::uniform(64).unwrap();
        let w = sample_brownian(&g, 1, 5, RngStream::new(3, 0)).unwrap();
        let b = solve_inverse_sde(&LinearDrift::new(1.3, 1), &w).unwrap();
        let u = ShiftMap::new(Arc::new(FeedbackDrift::ornstein_uhlenbeck(1.3, 1)));
        for (x, y) in w.iter().zip(&b) {
            assert!(u.apply(x).unwrap().max_abs_diff(y) < 1e-13);
        }
    }

    #[test]
    fn inverse_drift_reproduces_the_euler_solution() {
        let g = TimeGrid::uniform(64).unwrap();
        let v: Drift = Arc::new(FeedbackDrift::tanh(0.8, 1));
        let u = ShiftMap::new(Arc::new(InverseDrift::new(v.clone())));
        let m = ShiftMap::new(Arc::new(ComposedDrift::new(Arc::new(InverseDrift::new(v.clone())), v.clone()).unwrap()));
        for w in sample_brownian(&g, 1, 5, RngStream::new(6, 0)).unwrap() {
            let (b, _) = solve_inverse_path(v.as_ref(), &w).unwrap();
            assert!(u.apply(&w).unwrap().max_abs_diff(&b) < 1e-14);
            assert!(m.apply(&w).unwrap().max_abs_diff(&w) < 1e-13);
        }
    }

    #[test]
    fn cameron_martin_pair_has_zero_residuals() {
        let g = TimeGrid::uniform(16).unwrap();
        let u = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![0.4])));
        let v = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![-0.4])));
        let r = composition_residual(&ForwardMap::Shift(u.clone()), &v, &g, 20, RngStream::new(4, 0)).unwrap();
        assert!(r.max_sup_norm < 1e-14);
        let l = ExponentialDensity::new(Arc::new(AffineTimeDrift::constant(vec![-0.4])));
        let dev = invertibility_identity_check(&u, &l, &g, 20, RngStream::new(4, 0)).unwrap();
        assert!(dev.max < 1e-13);
        let wrong = invertibility_identity_check(&u, &ExponentialDensity::one(1), &g, 2000, RngStream::new(4, 0)).unwrap();
        assert!(wrong.mean.mean > 0.05);
    }

    #[test]
    fn radon_nikodym_check_on_constant_shift() {
        let g = TimeGrid::uniform(16).unwrap();
        let u = ShiftMap::new(Arc::new(AffineTimeDrift::constant(vec![0.4])));
        let dev = radon_nikodym_identity_check(&u, &g, 100, RngStream::new(5, 0), &EstimatorConfig::default()).unwrap();
        assert!(dev.mean.abs() < 1e-12);
        let id = radon_nikodym_identity_check(&ShiftMap::identity(1), &g, 10, RngStream::new(5, 0), &EstimatorConfig::default()).unwrap();
        assert_eq!(id.mean, 0.0);
    }
}
