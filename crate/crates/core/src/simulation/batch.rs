//! Parallel episode sweeps over configurations, scenarios and seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{run_episode, SimConfig};
use super::operator::OperatorModel;
use super::Scenario;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub id: String,
    pub config: SimConfig,
}

/// Cross product of arbitration weights and slack weights over `base`.
pub fn config_grid(base: &SimConfig, lambdas: &[f64], slack_weights: &[f64]) -> Vec<NamedConfig> {
    lambdas
        .iter()
        .flat_map(|&l| {
            slack_weights.iter().map(move |&w| NamedConfig {
                id: format!("lambda={l}_w={w}"),
                config: base.with_lambda(l).with_slack_weight(w),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub scenarios: Vec<Scenario>,
    pub configs: Vec<NamedConfig>,
    pub operator: OperatorModel,
    pub repetitions: usize,
    /// Repetition `r` runs with seed `seed + r`.
    pub seed: u64,
    /// Worker threads; `None` uses the rayon default.
    pub threads: Option<usize>,
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub scenario: String,
    pub seed: u64,
    pub config_id: String,
    pub success: bool,
    pub time_to_goal: Option<f64>,
    pub min_dist: Option<f64>,
    pub path_length: Option<f64>,
    pub effort: Option<f64>,
    pub error: Option<String>,
}

impl BatchRow {
    fn failed(scenario: &str, seed: u64, config_id: &str, error: String) -> Self {
        Self {
            scenario: scenario.to_owned(),
            seed,
            config_id: config_id.to_owned(),
            success: false,
            time_to_goal: None,
            min_dist: None,
            path_length: None,
            effort: None,
            error: Some(error),
        }
    }
}

fn run_one(
    scenario: &Scenario,
    cfg: &NamedConfig,
    operator: &OperatorModel,
    seed: u64,
) -> BatchRow {
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        run_episode(scenario, operator, &cfg.config, seed)
    }));
    match outcome {
        Ok(Ok(result)) => {
            let m = result.metrics;
            BatchRow {
                scenario: scenario.name.clone(),
                seed,
                config_id: cfg.id.clone(),
                success: m.success,
                time_to_goal: m.time_to_goal,
                min_dist: m.min_obstacle_distance,
                path_length: Some(m.path_length),
                effort: Some(m.human_effort),
                error: None,
            }
        }
        Ok(Err(e)) => BatchRow::failed(&scenario.name, seed, &cfg.id, e.to_string()),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "episode panicked".into());
            BatchRow::failed(&scenario.name, seed, &cfg.id, msg)
        }
    }
}

/// Rows come back in (config, scenario, repetition) order regardless of scheduling.
pub fn run_batch(spec: &BatchSpec) -> Result<Vec<BatchRow>> {
    let jobs: Vec<_> = spec
        .configs
        .iter()
        .flat_map(|c| {
            spec.scenarios.iter().flat_map(move |s| {
                (0..spec.repetitions).map(move |r| (c, s, spec.seed.wrapping_add(r as u64)))
            })
        })
        .collect();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = spec.threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|(c, s, seed)| run_one(s, c, &spec.operator, *seed))
            .collect()
    }))
}

pub fn write_csv<W: Write>(rows: &[BatchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(rows: &[BatchRow], path: impl AsRef<Path>) -> Result<()> {
    write_csv(rows, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config_id: String,
    pub episodes: usize,
    pub successes: usize,
    pub errors: usize,
    pub success_rate: f64,
    pub mean_time_to_goal: Option<f64>,
    /// Worst case over the episodes.
    pub min_dist: Option<f64>,
    pub mean_path_length: Option<f64>,
    pub mean_effort: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aggregates rows per configuration, in first-appearance order.
pub fn summarize(rows: &[BatchRow]) -> Vec<ConfigSummary> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&BatchRow>> = BTreeMap::new();
    for r in rows {
        let entry = groups.entry(&r.config_id).or_default();
        if entry.is_empty() {
            order.push(r.config_id.as_str());
        }
        entry.push(r);
    }
    order
        .into_iter()
        .map(|id| {
            let g = &groups[id];
            let successes = g.iter().filter(|r| r.success).count();
            ConfigSummary {
                config_id: id.to_owned(),
                episodes: g.len(),
                successes,
                errors: g.iter().filter(|r| r.error.is_some()).count(),
                success_rate: successes as f64 / g.len() as f64,
                mean_time_to_goal: mean(g.iter().filter_map(|r| r.time_to_goal)),
                min_dist: g.iter().filter_map(|r| r.min_dist).reduce(f64::min),
                mean_path_length: mean(g.iter().filter_map(|r| r.path_length)),
                mean_effort: mean(g.iter().filter_map(|r| r.effort)),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizing() {
        let grid = config_grid(&SimConfig::default(), &[0.1, 0.35, 0.5], &[10.0, 1e3, 1e4]);
        assert_eq!(grid.len(), 9);
        assert!(grid.iter().all(|c| c.config.validate().is_ok()));
        let ids: std::collections::BTreeSet<_> = grid.iter().map(|c| &c.id).collect();
        assert_eq!(ids.len(), 9);
        assert_eq!(grid[4].config.blend.lambda, 0.35);
        assert_eq!(grid[4].config.nmpc.slack_weight, 1e3);
    }

    #[test]
    fn summary_counts() {
        let ok = |cfg: &str, d: f64| BatchRow {
            scenario: "s".into(),
            seed: 0,
            config_id: cfg.into(),
            success: true,
            time_to_goal: Some(10.0),
            min_dist: Some(d),
            path_length: Some(3.0),
            effort: Some(0.0),
            error: None,
        };
        let rows = vec![
            ok("b", 0.6),
            ok("a", 0.7),
            ok("b", 0.4),
            BatchRow::failed("s", 1, "b", "boom".into()),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].config_id, "b");
        assert_eq!((s[0].episodes, s[0].successes, s[0].errors), (3, 2, 1));
        assert_eq!(s[0].min_dist, Some(0.4));
    }

    #[test]
    fn csv_has_header_and_error_column() {
        let rows = vec![BatchRow::failed("lab", 3, "c0", "bad, config".into())];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "scenario,seed,config_id,success,time_to_goal,min_dist,path_length,effort,error"
        );
        assert_eq!(lines.next().unwrap(), "lab,3,c0,false,,,,,\"bad, config\"");
    }
}
