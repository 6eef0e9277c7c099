//! Experiment configuration: `[section]` headers over `key = value` lines.
//!
//! ```text
//! [experiment]
//! kind = entropy-gap
//! seed = 7
//! n_paths = 20000
//!
//! [drift]
//! name = ou
//! alpha = 1.0
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::Serialize;
use wienerlab::conditional::{EstimatorConfig, EstimatorKind, FeatureSet, SplitMode};
use wienerlab::entropy::{GapConfig, TalagrandConfig};
use wienerlab::registry::Params;
use wienerlab::variational::VariationalConfig;
use wienerlab::wiener::TimeGrid;

use crate::error::CliError;

/// Raw sections in file order-independent form.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Ini {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut ini = Ini::default();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Config(format!("line {}: {msg}", lineno + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header `{line}`")))?
                    .trim();
                if name.is_empty() || !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section `[{name}]`; known: {}", SECTIONS.join(", "))));
                }
                if ini.sections.contains_key(name) {
                    return Err(at(format!("section `[{name}]` appears twice")));
                }
                ini.sections.insert(name.to_string(), BTreeMap::new());
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(at("empty key".into()));
            }
            let section = current.as_ref().ok_or_else(|| at(format!("key `{key}` outside any section")))?;
            let entries = ini.sections.get_mut(section).expect("section inserted on header");
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(at(format!("duplicate key `{key}` in [{section}]")));
            }
        }
        Ok(ini)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.into());
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Every section except `output` and `sweep`, which do not affect results.
    pub fn echo(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        self.sections
            .iter()
            .filter(|(k, _)| k.as_str() != "output" && k.as_str() != "sweep")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

impl fmt::Display for Ini {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, entries) in &self.sections {
            writeln!(f, "[{name}]")?;
            for (k, v) in entries {
                writeln!(f, "{k} = {v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub const SECTIONS: &[&str] = &[
    "experiment",
    "grid",
    "drift",
    "density",
    "functional",
    "estimator",
    "gap",
    "talagrand",
    "variational",
    "preserve",
    "sweep",
    "output",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    EntropyGap,
    Invert,
    Innovate,
    Talagrand,
    Variational,
    Preserve,
}

impl Kind {
    pub const ALL: [Kind; 6] = [Kind::EntropyGap, Kind::Invert, Kind::Innovate, Kind::Talagrand, Kind::Variational, Kind::Preserve];

    pub fn name(self) -> &'static str {
        match self {
            Kind::EntropyGap => "entropy-gap",
            Kind::Invert => "invert",
            Kind::Innovate => "innovate",
            Kind::Talagrand => "talagrand",
            Kind::Variational => "variational",
            Kind::Preserve => "preserve",
        }
    }

    /// Sections the kind reads besides `experiment`, `grid` and `output`.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Kind::EntropyGap => &["drift", "estimator", "gap"],
            Kind::Invert => &["drift"],
            Kind::Innovate => &["drift", "estimator"],
            Kind::Talagrand => &["density", "talagrand"],
            Kind::Variational => &["functional", "estimator", "gap", "variational"],
            Kind::Preserve => &["drift", "density", "preserve"],
        }
    }
}

impl FromStr for Kind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Kind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            CliError::Config(format!(
                "unknown experiment kind `{s}`; available: {}",
                Kind::ALL.map(Kind::name).join(", ")
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridSpec {
    Uniform { n_steps: usize },
    Geometric { levels: usize, steps_per_level: usize },
    Explicit { times: Vec<f64> },
}

impl GridSpec {
    pub fn build(&self) -> Result<TimeGrid, CliError> {
        Ok(match self {
            GridSpec::Uniform { n_steps } => TimeGrid::uniform(*n_steps)?,
            GridSpec::Geometric { levels, steps_per_level } => TimeGrid::geometric(*levels, *steps_per_level)?,
            GridSpec::Explicit { times } => TimeGrid::new(times.clone())?,
        })
    }
}

/// A registry name with numeric parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Named {
    pub name: String,
    pub params: Params,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    pub n_paths: usize,
    pub dim: usize,
    pub replicates: usize,
    pub export_paths: usize,
    pub grid: GridSpec,
    pub drift: Option<Named>,
    pub density: Option<Named>,
    pub functional: Option<Named>,
    pub estimator: EstimatorConfig,
    pub gap: GapConfig,
    pub talagrand: TalagrandConfig,
    pub projection_times: Vec<f64>,
    pub variational: VariationalConfig,
    pub check_paths: usize,
    pub duality_tolerance: f64,
    pub test_functions: Vec<String>,
    pub preserve_map: PreserveMap,
    pub out_dir: Option<PathBuf>,
    /// The configuration as read, with overrides applied.
    pub ini: Ini,
}

/// Map tested by a `preserve` run, built from the `[drift]` entry `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreserveMap {
    /// `U∘V` with `V = I + v` and `U` its solved inverse.
    Composition,
    /// `I + v` alone.
    Shift,
}

/// Consumes keys so that leftovers can be reported as unknown.
struct Reader {
    remaining: BTreeMap<String, BTreeMap<String, String>>,
}

impl Reader {
    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.remaining.get_mut(section)?.remove(key)
    }

    fn parsed<T: FromStr>(&mut self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match self.take(section, key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("[{section}] {key}: cannot parse `{v}`"))),
        }
    }

    fn or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    fn list(&mut self, section: &str, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.take(section, key).map(|v| parse_list(&v).map_err(|e| CliError::Config(format!("[{section}] {key}: {e}")))).transpose()
    }

    /// `name` plus every other key of the section as a number.
    fn named(&mut self, section: &str) -> Result<Option<Named>, CliError> {
        let Some(mut entries) = self.remaining.remove(section) else {
            return Ok(None);
        };
        let name = entries.remove("name").ok_or_else(|| CliError::Config(format!("[{section}] requires `name`")))?;
        let mut params = Params::new();
        for (k, v) in entries {
            let x: f64 = v.parse().map_err(|_| CliError::Config(format!("[{section}] {k}: `{v}` is not a number")))?;
            params.insert(k, x);
        }
        Ok(Some(Named { name, params }))
    }

    fn leftovers(&self) -> Vec<String> {
        self.remaining
            .iter()
            .flat_map(|(s, keys)| keys.keys().map(move |k| format!("[{s}] {k}")))
            .collect()
    }
}

/// Comma-separated numbers; an empty string is an empty list.
pub fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect()
}

fn parse_estimator(r: &mut Reader, default_features: FeatureSet) -> Result<EstimatorConfig, CliError> {
    let s = "estimator";
    let features = match r.take(s, "features") {
        Some(f) => FeatureSet::parse(&f)?,
        None => default_features,
    };
    let kind = match r.take(s, "kind").as_deref() {
        None | Some("ridge") => EstimatorKind::Ridge,
        Some("kernel") => EstimatorKind::Kernel { bins: r.or(s, "bins", 50)? },
        Some(other) => return Err(CliError::Config(format!("[estimator] kind: unknown `{other}`; available: ridge, kernel"))),
    };
    let ridge = r.parsed(s, "ridge")?;
    let split = match r.take(s, "split").as_deref() {
        None | Some("independent") => SplitMode::Independent { train_paths: r.parsed(s, "train_paths")? },
        Some("single-batch") => SplitMode::SingleBatch,
        Some(other) => {
            return Err(CliError::Config(format!(
                "[estimator] split: unknown `{other}`; available: independent, single-batch"
            )))
        }
    };
    Ok(EstimatorConfig { kind, features, ridge, split })
}

impl ExperimentConfig {
    pub fn from_ini(ini: &Ini) -> Result<Self, CliError> {
        let mut r = Reader { remaining: ini.sections.clone() };
        let kind: Kind = r
            .take("experiment", "kind")
            .ok_or_else(|| CliError::Config("[experiment] requires `kind`".into()))?
            .parse()?;
        for section in ["drift", "density", "functional", "estimator", "gap", "talagrand", "variational", "preserve"] {
            if ini.has_section(section) && !kind.sections().contains(&section) {
                return Err(CliError::Config(format!("section [{section}] is not used by kind `{}`", kind.name())));
            }
        }
        let e = "experiment";
        let seed = r.or(e, "seed", 0u64)?;
        let n_paths = r.or(e, "n_paths", 10_000usize)?;
        let dim = r.or(e, "dim", 1usize)?;
        let replicates = r.or(e, "replicates", 1usize)?;
        let export_paths = r.or(e, "export_paths", 20usize)?;
        if n_paths < 2 {
            return Err(CliError::Config("[experiment] n_paths must be at least 2".into()));
        }
        if dim == 0 {
            return Err(CliError::Config("[experiment] dim must be positive".into()));
        }
        if replicates == 0 {
            return Err(CliError::Config("[experiment] replicates must be positive".into()));
        }
        let grid = match r.take("grid", "kind").as_deref() {
            None | Some("uniform") => GridSpec::Uniform { n_steps: r.or("grid", "n_steps", wienerlab::wiener::DEFAULT_STEPS)? },
            Some("geometric") => GridSpec::Geometric {
                levels: r.or("grid", "levels", 6)?,
                steps_per_level: r.or("grid", "steps_per_level", 16)?,
            },
            Some("explicit") => GridSpec::Explicit {
                times: r.list("grid", "times")?.ok_or_else(|| CliError::Config("[grid] explicit grids require `times`".into()))?,
            },
            Some(other) => {
                return Err(CliError::Config(format!(
                    "[grid] kind: unknown `{other}`; available: uniform, geometric, explicit"
                )))
            }
        };
        let drift = r.named("drift")?;
        let density = r.named("density")?;
        let functional = r.named("functional")?;
        let default_features = if kind == Kind::Variational {
            VariationalConfig::default().estimator.features
        } else {
            FeatureSet::Default
        };
        let estimator = parse_estimator(&mut r, default_features)?;
        let g0 = GapConfig::default();
        let gap = GapConfig {
            z: r.or("gap", "z", g0.z)?,
            threshold: r.or("gap", "threshold", g0.threshold)?,
            tolerance: r.or("gap", "tolerance", g0.tolerance)?,
        };
        let t0 = TalagrandConfig::default();
        let t = "talagrand";
        let projection_times = r.list(t, "times")?.unwrap_or_else(|| vec![1.0]);
        let talagrand = TalagrandConfig {
            epsilon: r.parsed(t, "epsilon")?,
            points: r.or(t, "points", t0.points)?,
            max_iter: r.or(t, "max_iter", t0.max_iter)?,
            tol: r.or(t, "tol", t0.tol)?,
            z: r.or(t, "z", t0.z)?,
        };
        let v0 = VariationalConfig::default();
        let v = "variational";
        let variational = VariationalConfig {
            estimator: estimator.clone(),
            max_iter: r.or(v, "max_iter", v0.max_iter)?,
            tol: r.or(v, "tol", v0.tol)?,
            validation_paths: r.or(v, "validation_paths", v0.validation_paths)?,
        };
        let check_paths = r.or(v, "check_paths", n_paths.min(10_000))?;
        let duality_tolerance = r.or(v, "duality_tolerance", 0.01)?;
        let test_functions = match r.take("preserve", "functions") {
            Some(list) => list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            None => crate::experiment::TEST_FUNCTIONS.iter().map(|s| s.to_string()).collect(),
        };
        let preserve_map = match r.take("preserve", "map").as_deref() {
            None | Some("composition") => PreserveMap::Composition,
            Some("shift") => PreserveMap::Shift,
            Some(other) => return Err(CliError::Config(format!("[preserve] map must be composition or shift, got {other:?}"))),
        };
        let out_dir = r.take("output", "dir").map(PathBuf::from);
        r.remaining.remove("sweep");
        let left = r.leftovers();
        if !left.is_empty() {
            return Err(CliError::Config(format!("unknown keys: {}", left.join(", "))));
        }
        let required = |what: &str, v: &Option<Named>| {
            if v.is_none() {
                Err(CliError::Config(format!("kind `{}` requires a [{what}] section", kind.name())))
            } else {
                Ok(())
            }
        };
        match kind {
            Kind::EntropyGap | Kind::Invert | Kind::Innovate => required("drift", &drift)?,
            Kind::Talagrand => required("density", &density)?,
            Kind::Variational => required("functional", &functional)?,
            Kind::Preserve => {
                required("drift", &drift)?;
                required("density", &density)?;
            }
        }
        Ok(Self {
            kind,
            seed,
            n_paths,
            dim,
            replicates,
            export_paths,
            grid,
            drift,
            density,
            functional,
            estimator,
            gap,
            talagrand,
            projection_times,
            variational,
            check_paths,
            duality_tolerance,
            test_functions,
            preserve_map,
            out_dir,
            ini: ini.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let ini = Ini::parse("# top\n[experiment]\nkind = invert ; trailing\n\n[drift]\nname=ou\nalpha = 2\n").unwrap();
        assert_eq!(ini.get("experiment", "kind"), Some("invert"));
        let cfg = ExperimentConfig::from_ini(&ini).unwrap();
        assert_eq!(cfg.kind, Kind::Invert);
        assert_eq!(cfg.drift.unwrap().params["alpha"], 2.0);
        assert_eq!(cfg.grid, GridSpec::Uniform { n_steps: 256 });
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "kind = invert",
            "[experiment\nkind = invert",
            "[nope]\n",
            "[experiment]\nkind\n",
            "[experiment]\nkind = a\nkind = b\n",
        ] {
            assert!(matches!(Ini::parse(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn rejects_unknown_keys_and_unused_sections() {
        let ini = Ini::parse("[experiment]\nkind = invert\nnpaths = 3\n[drift]\nname = ou\n").unwrap();
        let err = ExperimentConfig::from_ini(&ini).unwrap_err().to_string();
        assert!(err.contains("[experiment] npaths"), "{err}");
        let ini = Ini::parse("[experiment]\nkind = invert\n[drift]\nname = ou\n[functional]\nname = zero\n").unwrap();
        assert!(ExperimentConfig::from_ini(&ini).is_err());
        let ini = Ini::parse("[experiment]\nkind = talagrand\n").unwrap();
        assert!(ExperimentConfig::from_ini(&ini).unwrap_err().to_string().contains("[density]"));
    }

    #[test]
    fn variational_defaults_to_polynomial_features() {
        let ini = Ini::parse("[experiment]\nkind = variational\n[functional]\nname = quadratic\n").unwrap();
        let cfg = ExperimentConfig::from_ini(&ini).unwrap();
        assert_eq!(cfg.variational.estimator.features, FeatureSet::StatePoly { degree: 3 });
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list("0.5, 1").unwrap(), vec![0.5, 1.0]);
        assert!(parse_list("").unwrap().is_empty());
        assert!(parse_list("a").is_err());
    }
}
