//! Dispatch of one configured experiment to the core routines.

use std::fmt::Write as _;
use std::sync::Arc;

use serde_json::{json, Value};
use wienerlab::conditional::EstimatorConfig;
use wienerlab::entropy::{invertibility_gap, measure_preservation_test, talagrand_check, TestFunction};
use wienerlab::innovation::{compute_innovation, conditional_girsanov_exponential, eval_stream, ProjectedDrift};
use wienerlab::inverse::{composition_residual, solve_inverse_sde, ForwardMap, InverseDrift};
use wienerlab::registry::{build_drift, build_functional};
use wienerlab::shifts::{ComposedDrift, Drift, ExponentialDensity, ShiftMap};
use wienerlab::stats::Estimate;
use wienerlab::variational::{duality_check, duality_check_mc, fixed_point_drift, invertibility_of_minimizer, DualityReport};
use wienerlab::wiener::{brownian_path, write_paths_csv, RngStream, TimeGrid};
use wienerlab::Error;

use crate::config::{ExperimentConfig, Kind, Named, PreserveMap};
use crate::error::CliError;

pub const REPORT_SCHEMA: &str = "wienerlab-report/1";

pub const TEST_FUNCTIONS: &[&str] = &["endpoint", "tanh-endpoint", "cos-midpoint", "tanh-max"];

/// A data file produced by a run, written only after the run succeeds.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Value,
    pub summary: String,
    pub artifacts: Vec<Artifact>,
}

impl RunOutput {
    /// Kind-specific results, the `result` member of the report.
    pub fn result(&self) -> &Value {
        &self.report["result"]
    }
}

fn artifact(name: &str, write: impl FnOnce(&mut Vec<u8>) -> wienerlab::Result<()>) -> Result<Artifact, CliError> {
    let mut bytes = Vec::new();
    write(&mut bytes)?;
    Ok(Artifact { name: name.into(), bytes })
}

fn test_function(name: &str) -> Result<TestFunction, CliError> {
    Ok(match name {
        "endpoint" => TestFunction::endpoint(),
        "tanh-endpoint" => TestFunction::tanh_endpoint(),
        "cos-midpoint" => TestFunction::cos_midpoint(),
        "tanh-max" => TestFunction::tanh_running_max(),
        other => {
            return Err(CliError::Core(Error::Unknown {
                what: "test function",
                name: other.into(),
                available: TEST_FUNCTIONS.iter().map(|s| s.to_string()).collect(),
            }))
        }
    })
}

fn drift(named: &Option<Named>, grid: &TimeGrid, dim: usize) -> Result<Drift, CliError> {
    let named = named.as_ref().expect("presence checked when the config was read");
    Ok(build_drift(&named.name, &named.params, grid, dim)?)
}

fn row(label: &str, e: &Estimate) -> String {
    format!("{label:<28} {:>14.6e} {:>12.3e}\n", e.mean, e.stderr)
}

fn table_header() -> String {
    format!("{:<28} {:>14} {:>12}\n", "quantity", "mean", "stderr")
}

/// Runs the experiment; nothing is written to disk.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let grid = cfg.grid.build()?;
    let rng = RngStream::new(cfg.seed, 0);
    let mut artifacts = Vec::new();
    let mut summary = format!("kind: {}\nseed: {}\nn_paths: {}\nn_steps: {}\n\n", cfg.kind.name(), cfg.seed, cfg.n_paths, grid.n_steps());
    let result = match cfg.kind {
        Kind::EntropyGap => {
            let shift = ShiftMap::new(drift(&cfg.drift, &grid, cfg.dim)?);
            let mut reports = Vec::new();
            for r in 0..cfg.replicates {
                let stream = RngStream::new(cfg.seed, r as u64);
                reports.push(invertibility_gap(&shift, &grid, cfg.n_paths, stream, &cfg.estimator, &cfg.gap)?);
            }
            let first = &reports[0];
            summary += &table_header();
            summary += &row("kinetic energy", &first.kinetic_energy);
            summary += &row("entropy", &first.entropy);
            summary += &row("gap", &first.gap);
            let _ = writeln!(summary, "verdict: {}", first.verdict);
            if let Some(w) = &first.estimator_warning {
                let _ = writeln!(summary, "warning: {w}");
            }
            artifacts.push(artifact("replicates.csv", |out| {
                use std::io::Write;
                writeln!(out, "replicate,kinetic,kinetic_stderr,entropy,entropy_stderr,gap,gap_stderr,verdict")?;
                for (r, g) in reports.iter().enumerate() {
                    writeln!(
                        out,
                        "{r},{},{},{},{},{},{},{}",
                        g.kinetic_energy.mean, g.kinetic_energy.stderr, g.entropy.mean, g.entropy.stderr, g.gap.mean, g.gap.stderr, g.verdict
                    )?;
                }
                Ok(())
            })?);
            json!({ "gap": first, "replicates": reports })
        }
        Kind::Invert => {
            let v = drift(&cfg.drift, &grid, cfg.dim)?;
            let residual = composition_residual(&ForwardMap::InverseOf(v.clone()), &ShiftMap::new(v.clone()), &grid, cfg.n_paths, rng)?;
            let eval = eval_stream(rng);
            let k = cfg.export_paths.min(cfg.n_paths);
            let driving: Vec<_> = (0..k).map(|i| brownian_path(&grid, cfg.dim, eval.offset(i as u64))).collect();
            let solved = solve_inverse_sde(v.as_ref(), &driving)?;
            artifacts.push(artifact("driving_paths.csv", |out| write_paths_csv(&driving, out))?);
            artifacts.push(artifact("solved_paths.csv", |out| write_paths_csv(&solved, out))?);
            artifacts.push(artifact("residuals.csv", |out| {
                use std::io::Write;
                writeln!(out, "path_id,sup_residual")?;
                for (i, r) in residual.per_path.iter().enumerate() {
                    writeln!(out, "{i},{r}")?;
                }
                Ok(())
            })?);
            summary += &table_header();
            summary += &row("sup residual", &residual.sup_norm);
            summary += &row("L2 residual", &residual.l2_norm);
            let _ = writeln!(summary, "largest sup residual: {:.3e}", residual.max_sup_norm);
            json!({ "composition": residual })
        }
        Kind::Innovate => {
            let shift = ShiftMap::new(drift(&cfg.drift, &grid, cfg.dim)?);
            let res = compute_innovation(&shift, &grid, cfg.n_paths, rng, &cfg.estimator)?;
            let l = Estimate::from_samples(&conditional_girsanov_exponential(&res)?);
            let d = &res.diagnostics;
            let z = cfg.gap.z;
            artifacts.push(artifact("innovation.csv", |out| res.write_csv_head(out, cfg.export_paths))?);
            artifacts.push(Artifact { name: "diagnostics.json".into(), bytes: res.diagnostics_json()?.into_bytes() });
            if let Some(ridge) = res.projection.estimator().and_then(|e| e.as_ridge()) {
                artifacts.push(artifact("coefficients.csv", |out| ridge.write_csv(out))?);
            }
            summary += &table_header();
            for (c, qv) in d.quadratic_variation.iter().enumerate() {
                summary += &row(&format!("quadratic variation [{c}]"), qv);
            }
            summary += &row("lag-1 correlation", &d.lag1_correlation);
            summary += &row("driving correlation", &d.driving_correlation);
            summary += &row("conditional exponential", &l);
            let _ = writeln!(summary, "KS statistic {:.4} (p = {:.3}, n = {})", d.ks_statistic, d.ks_pvalue, d.ks_sample_size);
            let projection = match res.projection {
                ProjectedDrift::Exact(_) => "exact",
                ProjectedDrift::Fitted(_) => "fitted",
            };
            json!({
                "projection": projection,
                "diagnostics": d,
                "conditional_exponential": l,
                "passes": {
                    "quadratic_variation": d.qv_passes(),
                    "lag1": d.lag1_passes(z),
                    "exponential": l.within(1.0, z),
                },
            })
        }
        Kind::Talagrand => {
            let density = ExponentialDensity::new(drift(&cfg.density, &grid, cfg.dim)?);
            let r = talagrand_check(&density, &cfg.projection_times, &grid, cfg.n_paths, rng, &cfg.talagrand)?;
            summary += &table_header();
            summary += &row("2E[L log L]", &r.entropy_bound);
            summary += &row("coupling cost", &r.coupling_cost);
            let _ = writeln!(
                summary,
                "sinkhorn lower estimate {:.6} (tolerance {:.3e}, epsilon {:.3e}, {} iterations)\ncoupling matches: {}\nlower bound holds: {}",
                r.sinkhorn_lower, r.sinkhorn_tolerance, r.epsilon, r.sinkhorn_iterations, r.coupling_matches, r.lower_bound_holds
            );
            json!({ "transport": r })
        }
        Kind::Variational => {
            let named = cfg.functional.as_ref().expect("presence checked when the config was read");
            let f = build_functional(&named.name, &named.params, cfg.dim)?;
            let sol = fixed_point_drift(&f, &grid, cfg.n_paths, rng, &cfg.variational)?;
            let dual: DualityReport = match duality_check(&f, &sol) {
                Err(Error::QuadratureDimension(_)) => duality_check_mc(&f, &sol, cfg.n_paths, rng)?,
                other => other?,
            };
            let minimizer = invertibility_of_minimizer(&f, &sol, cfg.check_paths, RngStream::new(cfg.seed, 1), &EstimatorConfig::default(), &cfg.gap)?;
            let duality_passed = dual.gap.abs() < cfg.duality_tolerance;
            artifacts.push(artifact("trace.csv", |out| sol.write_trace_csv(out))?);
            artifacts.push(artifact("coefficients.csv", |out| sol.write_coefficients_csv(out))?);
            artifacts.push(Artifact { name: "duality.json".into(), bytes: serde_json::to_vec_pretty(&dual).map_err(Error::from)? });
            summary += &table_header();
            summary += &row("objective J(u*)", &sol.objective);
            summary += &row("J(0)", &sol.zero_drift_objective);
            summary += &row("E[f(U)]", &sol.f_under_shift);
            summary += &row("invertibility gap", &minimizer.gap.gap);
            let _ = writeln!(
                summary,
                "-log E[exp(-f)] = {:.6} ({})\nduality gap {:.3e} (tolerance {:.1e}): {}\niterations: {} (converged: {})\nminimizer verdict: {}",
                dual.log_partition,
                dual.method,
                dual.gap,
                cfg.duality_tolerance,
                if duality_passed { "pass" } else { "fail" },
                sol.trace.len(),
                sol.converged,
                minimizer.gap.verdict
            );
            json!({
                "solution": sol,
                "contraction_ratios": sol.contraction_ratios(),
                "duality": dual,
                "duality_tolerance": cfg.duality_tolerance,
                "duality_passed": duality_passed,
                "minimizer": minimizer,
            })
        }
        Kind::Preserve => {
            let v = drift(&cfg.drift, &grid, cfg.dim)?;
            let m = match cfg.preserve_map {
                PreserveMap::Shift => ShiftMap::new(v),
                PreserveMap::Composition => ShiftMap::new(Arc::new(ComposedDrift::new(Arc::new(InverseDrift::new(v.clone())), v)?)),
            };
            let density = ExponentialDensity::new(drift(&cfg.density, &grid, cfg.dim)?);
            let functions = cfg.test_functions.iter().map(|n| test_function(n)).collect::<Result<Vec<_>, _>>()?;
            let rows = measure_preservation_test(&m, &density, &functions, &grid, cfg.n_paths, rng)?;
            summary += &table_header();
            for r in &rows {
                summary += &row(&format!("{} ({})", r.function, if r.preserved { "ok" } else { "moved" }), &r.discrepancy);
            }
            artifacts.push(artifact("preservation.csv", |out| {
                use std::io::Write;
                writeln!(out, "function,discrepancy,stderr,preserved")?;
                for r in &rows {
                    writeln!(out, "{},{},{},{}", r.function, r.discrepancy.mean, r.discrepancy.stderr, r.preserved)?;
                }
                Ok(())
            })?);
            let all = rows.iter().all(|r| r.preserved);
            json!({ "map": cfg.preserve_map, "discrepancies": rows, "all_preserved": all })
        }
    };
    let report = json!({
        "schema": REPORT_SCHEMA,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "n_paths": cfg.n_paths,
        "dim": cfg.dim,
        "grid": { "n_steps": grid.n_steps(), "times": grid.times() },
        "config": cfg.ini.echo(),
        "result": result,
    });
    Ok(RunOutput { report, summary, artifacts })
}
