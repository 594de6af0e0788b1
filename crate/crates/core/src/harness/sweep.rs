use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_closed_loop, HarnessError, Metrics, ScenarioConfig};

/// Headway time below which a run counts as critical, s.
pub const CRITICAL_HEADWAY: f64 = 0.8;
/// Lateral gap below which a run counts as critical, m.
pub const CRITICAL_LATERAL: f64 = 1.0;

/// One grid point: a partial scenario merged over the base configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOverride {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(flatten)]
    pub values: toml::Table,
}

impl WeightOverride {
    pub fn new(label: impl Into<String>, values: toml::Table) -> Self {
        Self { label: Some(label.into()), values }
    }

    /// Base configuration with this point's values merged in, table by table.
    pub fn apply(&self, base: &ScenarioConfig) -> Result<ScenarioConfig, HarnessError> {
        let mut doc = toml::Table::try_from(base).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut doc, &self.values);
        let cfg: ScenarioConfig = doc.try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(into: &mut toml::Table, from: &toml::Table) {
    for (key, value) in from {
        match (into.get_mut(key), value) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src),
            _ => {
                into.insert(key.clone(), value.clone());
            }
        }
    }
}

/// Grid file layout: a list of `[[point]]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default)]
    pub point: Vec<WeightOverride>,
}

impl SweepGrid {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Scales the longitudinal progress weight of `base` by each factor.
    pub fn progress_scaling(base: &ScenarioConfig, factors: &[f64]) -> Self {
        let point = factors
            .iter()
            .map(|f| {
                let mut lon = toml::Table::new();
                lon.insert("progress".into(), toml::Value::Float(base.longitudinal.progress * f));
                let mut values = toml::Table::new();
                values.insert("longitudinal".into(), toml::Value::Table(lon));
                WeightOverride::new(format!("progress x{f}"), values)
            })
            .collect();
        Self { point }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub label: String,
    pub min_headway_time: Option<f64>,
    pub min_lateral_distance: Option<f64>,
    pub critical: bool,
    pub metrics: Option<Metrics>,
    /// Configuration, run or metric failure of this point.
    pub error: Option<String>,
}

fn evaluate(index: usize, point: &WeightOverride, base: &ScenarioConfig) -> SweepPoint {
    let label = point.label.clone().unwrap_or_else(|| format!("point {index}"));
    let outcome = point.apply(base).and_then(|cfg| {
        let log = run_closed_loop(&cfg)?;
        Ok((log.metrics()?, log.aborted))
    });
    match outcome {
        Ok((m, aborted)) => {
            let critical = m.collision
                || m.min_headway_time.is_some_and(|h| h < CRITICAL_HEADWAY)
                || m.min_lateral_distance.is_some_and(|d| d < CRITICAL_LATERAL);
            SweepPoint {
                index,
                label,
                min_headway_time: m.min_headway_time,
                min_lateral_distance: m.min_lateral_distance,
                critical,
                metrics: Some(m),
                error: aborted,
            }
        }
        Err(e) => SweepPoint {
            index,
            label,
            min_headway_time: None,
            min_lateral_distance: None,
            critical: false,
            metrics: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every grid point on `jobs` worker threads (all cores when `None`).
/// Failing points are reported in place and do not stop the sweep.
pub fn pareto_sweep(
    base: &ScenarioConfig,
    grid: &SweepGrid,
    jobs: Option<usize>,
) -> Result<Vec<SweepPoint>, HarnessError> {
    if grid.point.is_empty() {
        return Err(HarnessError::Config("sweep grid has no points".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(pool.install(|| grid.point.par_iter().enumerate().map(|(i, p)| evaluate(i, p, base)).collect()))
}
