//! One-axis sweeps over seeds, written as tidy CSV.

use rce_core::rce::ActionSource;
use serde::Serialize;

use crate::config::{parse_action_source, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::experiments::run_seed;
use crate::io::CSV_SCHEMA_LINE;
use crate::stats::mean;

pub const SWEEP_HEADER: &str = "axis_value,seed,objective";

#[derive(Debug, Clone, PartialEq)]
pub enum SweepAxis {
    NStep(Vec<usize>),
    NumSuccesses(Vec<usize>),
    ActionSource(Vec<ActionSource>),
}

impl SweepAxis {
    pub fn parse(name: &str, values: &str) -> Result<Self> {
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let nums = || -> Result<Vec<usize>> {
            items
                .iter()
                .map(|v| v.parse().map_err(|_| HarnessError::Usage(format!("bad axis value `{v}`"))))
                .collect()
        };
        match name {
            "n_step" => Ok(SweepAxis::NStep(nums()?)),
            "num_successes" => Ok(SweepAxis::NumSuccesses(nums()?)),
            "action_source" => items
                .iter()
                .map(|v| parse_action_source(v).ok_or_else(|| HarnessError::Usage(format!("bad axis value `{v}`"))))
                .collect::<Result<Vec<_>>>()
                .map(SweepAxis::ActionSource),
            other => Err(HarnessError::Usage(format!("unknown sweep axis `{other}`"))),
        }
    }

    fn cells(&self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let mut out = Vec::new();
        match self {
            SweepAxis::NStep(values) => {
                for &n in values {
                    let mut cfg = base.clone();
                    cfg.train.n_step = n;
                    out.push((n.to_string(), cfg));
                }
            }
            SweepAxis::NumSuccesses(values) => {
                for &c in values {
                    let mut cfg = base.clone();
                    cfg.successes.count = c;
                    out.push((c.to_string(), cfg));
                }
            }
            SweepAxis::ActionSource(values) => {
                for &a in values {
                    let mut cfg = base.clone();
                    cfg.train.action_source = a;
                    let name = match a {
                        ActionSource::CurrentPolicy => "current_policy",
                        ActionSource::BehaviorPolicy => "behavior_policy",
                    };
                    out.push((name.to_string(), cfg));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub seed: u64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_SCHEMA_LINE}\n{SWEEP_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.axis_value, r.seed, r.objective));
        }
        out
    }

    /// Objectives of one cell in seed order.
    pub fn cell(&self, axis_value: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.axis_value == axis_value)
            .map(|r| r.objective)
            .collect()
    }

    pub fn cell_mean(&self, axis_value: &str) -> f64 {
        mean(&self.cell(axis_value))
    }
}

/// Runs every cell for every seed in `cfg.seeds`; each objective is the
/// oracle evaluation of the run's final policy.
pub fn run_sweep(cfg: &ExperimentConfig, axis: &SweepAxis) -> Result<SweepResult> {
    let mut rows = Vec::new();
    for (value, cell) in axis.cells(cfg) {
        cell.validate()?;
        for &seed in &cfg.seeds {
            let run = run_seed(&cell, seed)?;
            log::info!("sweep cell {value} seed {seed}: objective {}", run.objective);
            rows.push(SweepRow {
                axis_value: value.clone(),
                seed,
                objective: run.objective,
            });
        }
    }
    Ok(SweepResult { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_axis_gives_header_only() {
        let axis = SweepAxis::parse("n_step", "").unwrap();
        let out = run_sweep(&ExperimentConfig::default(), &axis).unwrap();
        assert_eq!(out.to_csv(), "# schema=1\naxis_value,seed,objective\n");
    }

    #[test]
    fn parses_axes() {
        assert_eq!(SweepAxis::parse("n_step", "1, 10").unwrap(), SweepAxis::NStep(vec![1, 10]));
        assert_eq!(
            SweepAxis::parse("action_source", "behavior_policy").unwrap(),
            SweepAxis::ActionSource(vec![ActionSource::BehaviorPolicy])
        );
        assert!(SweepAxis::parse("bogus", "1").is_err());
        assert!(SweepAxis::parse("n_step", "x").is_err());
    }

    #[test]
    fn small_sweep_is_deterministic() {
        let mut cfg = ExperimentConfig::corridor();
        cfg.env = rce_core::EnvSpec {
            kind: rce_core::EnvKind::Chain { len: 5, two_way: true, noise: 0.1 },
            seed: 0,
        };
        cfg.train.max_iters = 20;
        cfg.seeds = vec![0, 1];
        let axis = SweepAxis::parse("n_step", "1,3").unwrap();
        let a = run_sweep(&cfg, &axis).unwrap();
        assert_eq!(a.rows.len(), 4);
        assert_eq!(a.to_csv(), run_sweep(&cfg, &axis).unwrap().to_csv());
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.objective)));
    }
}
