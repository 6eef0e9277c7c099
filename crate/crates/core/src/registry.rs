//! Named drifts and functionals with numeric parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::shifts::{tsirelson_drift, AffineTimeDrift, Drift, FeedbackDrift, LinearDrift, ZeroDrift};
use crate::variational::CylindricalFunctional;
use crate::wiener::TimeGrid;

pub type Params = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy)]
pub struct Entry {
    pub name: &'static str,
    /// Parameter names with defaults.
    pub params: &'static [(&'static str, f64)],
    pub description: &'static str,
    /// Whether `|u̇|` is uniformly bounded.
    pub bounded: bool,
}

pub const DRIFTS: &[Entry] = &[
    Entry { name: "zero", params: &[], description: "u = 0", bounded: true },
    Entry { name: "constant", params: &[("c", 0.5)], description: "u̇_t = c in every coordinate", bounded: true },
    Entry { name: "ramp", params: &[("slope", 1.0)], description: "u̇_t = slope · t", bounded: true },
    Entry { name: "linear", params: &[("beta", 1.0)], description: "u̇_t = beta · w(t)", bounded: false },
    Entry {
        name: "ou",
        params: &[("alpha", 1.0)],
        description: "u̇_t = −alpha · U_t; U is the Ornstein–Uhlenbeck Euler solution",
        bounded: false,
    },
    Entry { name: "tanh", params: &[("c", 1.0)], description: "u̇_t = −c · tanh(U_t)", bounded: true },
    Entry {
        name: "tsirelson",
        params: &[("levels", 4.0)],
        description: "truncated Tsirelson drift on breakpoints 2^{j−K}",
        bounded: true,
    },
];

pub const FUNCTIONALS: &[Entry] = &[
    Entry { name: "zero", params: &[], description: "f = 0", bounded: true },
    Entry { name: "quadratic", params: &[("lambda", 0.25)], description: "f = lambda · |w(1)|²", bounded: false },
    Entry { name: "tanh", params: &[("lambda", 0.5)], description: "f = lambda · tanh(w(1)), soft threshold", bounded: true },
    Entry { name: "saturating", params: &[("lambda", 0.5)], description: "f = lambda · x²/(1 + x²), x = w(1)", bounded: true },
    Entry { name: "spread", params: &[("lambda", 0.25)], description: "f = lambda · (w(1) − w(½))²", bounded: false },
];

fn lookup(table: &'static [Entry], what: &'static str, name: &str) -> Result<&'static Entry> {
    let canonical = if what == "functional" && name == "soft-threshold" { "tanh" } else { name };
    table.iter().find(|e| e.name == canonical).ok_or_else(|| Error::Unknown {
        what,
        name: name.into(),
        available: table.iter().map(|e| e.name.to_string()).collect(),
    })
}

/// Resolves parameters against the entry's defaults, rejecting unknown keys.
fn resolve(entry: &Entry, params: &Params) -> Result<Vec<f64>> {
    if let Some(k) = params.keys().find(|k| !entry.params.iter().any(|(p, _)| p == k)) {
        return Err(Error::Unknown {
            what: "parameter",
            name: format!("{}.{k}", entry.name),
            available: entry.params.iter().map(|(p, _)| p.to_string()).collect(),
        });
    }
    let values: Vec<f64> = entry.params.iter().map(|(p, d)| params.get(*p).copied().unwrap_or(*d)).collect();
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("{}: non-finite parameter {v}", entry.name)));
    }
    Ok(values)
}

pub fn drift_entry(name: &str) -> Result<&'static Entry> {
    lookup(DRIFTS, "drift", name)
}

pub fn functional_entry(name: &str) -> Result<&'static Entry> {
    lookup(FUNCTIONALS, "functional", name)
}

pub fn build_drift(name: &str, params: &Params, grid: &TimeGrid, dim: usize) -> Result<Drift> {
    let entry = drift_entry(name)?;
    let p = resolve(entry, params)?;
    Ok(match entry.name {
        "zero" => Arc::new(ZeroDrift::new(dim)),
        "constant" => Arc::new(AffineTimeDrift::constant(vec![p[0]; dim])),
        "ramp" => Arc::new(AffineTimeDrift::ramp(vec![p[0]; dim])),
        "linear" => Arc::new(LinearDrift::new(p[0], dim)),
        "ou" => Arc::new(FeedbackDrift::ornstein_uhlenbeck(p[0], dim)),
        "tanh" => Arc::new(FeedbackDrift::tanh(p[0], dim)),
        "tsirelson" => {
            if p[0] < 1.0 || p[0].fract() != 0.0 {
                return Err(Error::InvalidArgument(format!("tsirelson levels must be a positive integer, got {}", p[0])));
            }
            Arc::new(tsirelson_drift(p[0] as usize, grid, dim)?)
        }
        _ => unreachable!("registry entry without builder"),
    })
}

pub fn build_functional(name: &str, params: &Params, dim: usize) -> Result<CylindricalFunctional> {
    let entry = functional_entry(name)?;
    let p = resolve(entry, params)?;
    match entry.name {
        "zero" => CylindricalFunctional::zero(dim),
        "quadratic" => CylindricalFunctional::quadratic(p[0], dim),
        "tanh" => CylindricalFunctional::tanh(p[0], dim),
        "saturating" => CylindricalFunctional::saturating(p[0], dim),
        "spread" => {
            if dim != 1 {
                return Err(Error::InvalidArgument("spread functional is one-dimensional".into()));
            }
            CylindricalFunctional::spread(p[0])
        }
        _ => unreachable!("registry entry without builder"),
    }
}

/// Every registry drift with its default parameters.
pub fn default_drifts(grid: &TimeGrid, dim: usize) -> Result<Vec<Drift>> {
    DRIFTS.iter().map(|e| build_drift(e.name, &Params::new(), grid, dim)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_names_list_the_registry() {
        let g = TimeGrid::uniform(16).unwrap();
        match build_drift("nope", &Params::new(), &g, 1) {
            Err(Error::Unknown { available, .. }) => assert!(available.contains(&"ou".to_string())),
            other => panic!("{other:?}"),
        }
        let mut p = Params::new();
        p.insert("gamma".into(), 1.0);
        assert!(matches!(build_drift("ou", &p, &g, 1), Err(Error::Unknown { what: "parameter", .. })));
    }

    #[test]
    fn every_entry_builds() {
        let g = TimeGrid::uniform(256).unwrap();
        assert_eq!(default_drifts(&g, 1).unwrap().len(), DRIFTS.len());
        for e in FUNCTIONALS {
            build_functional(e.name, &Params::new(), 1).unwrap();
        }
        assert!(build_functional("soft-threshold", &Params::new(), 1).is_ok());
    }

    #[test]
    fn bounded_flags_match_drift_bounds() {
        let g = TimeGrid::uniform(256).unwrap();
        for e in DRIFTS {
            let d = build_drift(e.name, &Params::new(), &g, 1).unwrap();
            assert_eq!(d.bound().is_some(), e.bounded, "{}", e.name);
        }
    }
}
