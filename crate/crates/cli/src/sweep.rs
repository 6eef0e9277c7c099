//! One run per value of a single configuration key; results are flattened
//! into CSV columns.

use serde_json::{json, Value};

use crate::config::{ExperimentConfig, Ini};
use crate::error::CliError;
use crate::experiment::{self, Artifact};

pub const SWEEP_SCHEMA: &str = "wienerlab-sweep/1";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub section: String,
    pub key: String,
    pub values: Vec<String>,
}

impl SweepSpec {
    pub fn from_ini(ini: &Ini) -> Result<Self, CliError> {
        let param = ini.get("sweep", "param").ok_or_else(|| CliError::Config("[sweep] requires `param`".into()))?;
        let (section, key) = param
            .split_once('.')
            .filter(|(s, k)| !s.is_empty() && !k.is_empty())
            .ok_or_else(|| CliError::Config(format!("[sweep] param `{param}` must be `section.key`")))?;
        if matches!(section, "sweep" | "output") || !crate::config::SECTIONS.contains(&section) {
            return Err(CliError::Config(format!("[sweep] param `{param}` does not name a sweepable section")));
        }
        let values = parse_values(ini.get("sweep", "values").unwrap_or(""))?;
        Ok(Self { section: section.into(), key: key.into(), values })
    }

    pub fn param(&self) -> String {
        format!("{}.{}", self.section, self.key)
    }
}

/// Comma-separated tokens, or an inclusive numeric range `start:end[:step]`.
pub fn parse_values(text: &str) -> Result<Vec<String>, CliError> {
    let text = text.trim();
    if text.contains(':') {
        let parts: Vec<f64> = text
            .split(':')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Config(format!("[sweep] values: bad range `{text}`")))?;
        let (start, end, step) = match parts[..] {
            [a, b] => (a, b, 1.0),
            [a, b, s] => (a, b, s),
            _ => return Err(CliError::Config(format!("[sweep] values: bad range `{text}`"))),
        };
        if !(step > 0.0) || !start.is_finite() || !end.is_finite() {
            return Err(CliError::Config(format!("[sweep] values: bad range `{text}`")));
        }
        let count = ((end - start) / step + 1e-9).floor();
        if count > 10_000.0 {
            return Err(CliError::Config(format!("[sweep] values: range `{text}` has too many points")));
        }
        return Ok((0..=(count.max(-1.0) as i64))
            .map(|i| start + i as f64 * step)
            .map(|x| ((x * 1e12).round() / 1e12).to_string())
            .collect());
    }
    Ok(text.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
}

/// Scalar leaves of a JSON value as `a.b.c` columns; arrays are skipped.
pub fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(_) => {}
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub struct SweepOutput {
    pub report: Value,
    pub summary: String,
    pub artifacts: Vec<Artifact>,
    pub failures: usize,
}

/// Runs every sweep point. Failing points are recorded and the sweep goes on.
pub fn run(template: &Ini) -> Result<SweepOutput, CliError> {
    let plan = SweepSpec::from_ini(template)?;
    ExperimentConfig::from_ini(template)?;
    let mut rows: Vec<(String, &'static str, String, Vec<(String, String)>)> = Vec::new();
    let mut points = Vec::new();
    for value in &plan.values {
        let mut ini = template.clone();
        ini.set(&plan.section, &plan.key, value.clone());
        let outcome = ExperimentConfig::from_ini(&ini).and_then(|cfg| experiment::run(&cfg));
        match outcome {
            Ok(out) => {
                let mut metrics = Vec::new();
                flatten("", out.result(), &mut metrics);
                points.push(json!({ "value": value, "status": "ok", "result": out.result() }));
                rows.push((value.clone(), "ok", String::new(), metrics));
            }
            Err(e) => {
                log::warn!("{} = {value}: {e}", plan.param());
                points.push(json!({ "value": value, "status": e.status(), "error": e.to_string() }));
                rows.push((value.clone(), e.status(), e.to_string(), Vec::new()));
            }
        }
    }
    let mut columns: Vec<String> = Vec::new();
    for (_, _, _, metrics) in &rows {
        for (k, _) in metrics {
            if !columns.contains(k) {
                columns.push(k.clone());
            }
        }
    }
    let mut csv = String::from("param,value,status,error");
    for c in &columns {
        csv.push(',');
        csv.push_str(&csv_field(c));
    }
    csv.push('\n');
    let param = plan.param();
    let mut summary = format!("sweep over {param}: {} points\n\n{:<16} {:<18}\n", plan.values.len(), "value", "status");
    for (value, status, error, metrics) in &rows {
        csv.push_str(&format!("{},{},{},{}", csv_field(&param), csv_field(value), status, csv_field(error)));
        for c in &columns {
            csv.push(',');
            if let Some((_, v)) = metrics.iter().find(|(k, _)| k == c) {
                csv.push_str(&csv_field(v));
            }
        }
        csv.push('\n');
        summary.push_str(&format!("{value:<16} {status:<18}{}\n", if error.is_empty() { String::new() } else { format!(" {error}") }));
    }
    let failures = rows.iter().filter(|r| r.1 != "ok").count();
    let report = json!({
        "schema": SWEEP_SCHEMA,
        "param": param,
        "values": plan.values,
        "config": template.echo(),
        "points": points,
    });
    Ok(SweepOutput {
        report,
        summary,
        artifacts: vec![Artifact { name: "sweep.csv".into(), bytes: csv.into_bytes() }],
        failures,
    })
}
