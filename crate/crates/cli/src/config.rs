//! TOML experiment description and its translation into per-method run
//! plans. Stepsizes and trigger weights default to the standard choices for
//! each method (`1/L` for the full and lazy methods, `1/(M L)` for the
//! incremental ones, `xi = 1/D` worker-side and `10/D` server-side) and can
//! be overridden per config, or replaced wholesale by the convergence-rate
//! schedule which derives `alpha`, `xi`, and the Lyapunov weights jointly.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use lagsim_core::engine::Method;
use lagsim_core::triggers::{schedule_theorem1, TriggerParams};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemConfig,
    pub run: RunSection,
    #[serde(default)]
    pub trigger: TriggerSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum ProblemKind {
    #[serde(rename = "synthetic-square")]
    SyntheticSquare,
    #[serde(rename = "synthetic-logistic")]
    SyntheticLogistic,
    #[serde(rename = "csv-square")]
    CsvSquare,
    #[serde(rename = "csv-logistic")]
    CsvLogistic,
}

impl ProblemKind {
    pub fn is_logistic(self) -> bool {
        matches!(self, ProblemKind::SyntheticLogistic | ProblemKind::CsvLogistic)
    }

    pub fn is_csv(self) -> bool {
        matches!(self, ProblemKind::CsvSquare | ProblemKind::CsvLogistic)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_samples")]
    pub samples_per_worker: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub data_seed: u64,
    /// l2 coefficient for logistic problems; square loss must leave it unset.
    #[serde(default)]
    pub l2_reg: Option<f64>,
    /// Per-worker smoothness targets for synthetic problems.
    #[serde(default)]
    pub target_lms: Option<Vec<f64>>,
    #[serde(default)]
    pub noise: Option<f64>,
    /// Data file for the csv kinds.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub label_column: usize,
    #[serde(default)]
    pub feature_cap: Option<usize>,
    #[serde(default)]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum ScheduleKind {
    #[serde(rename = "theorem1")]
    Theorem1,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSection {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub xi: Option<f64>,
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(default)]
    pub alpha: Option<f64>,
}

impl Default for TriggerSection {
    fn default() -> Self {
        Self { depth: default_depth(), xi: None, schedule: None, alpha: None }
    }
}

fn default_workers() -> usize {
    9
}
fn default_samples() -> usize {
    50
}
fn default_dim() -> usize {
    50
}
fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.name().to_string()).collect()
}
fn default_eps() -> f64 {
    1e-8
}
fn default_max_iters() -> usize {
    20_000
}
fn default_depth() -> usize {
    10
}

pub fn parse(text: &str) -> Result<Config> {
    let config: Config = toml::from_str(text).context("invalid experiment config")?;
    config.validate()?;
    Ok(config)
}

impl Config {
    fn validate(&self) -> Result<()> {
        let p = &self.problem;
        ensure!(p.workers >= 1, "problem.workers must be at least 1");
        if p.kind.is_csv() {
            ensure!(p.path.is_some(), "csv problems need problem.path");
        } else {
            ensure!(p.path.is_none(), "problem.path only applies to csv kinds");
            ensure!(p.samples_per_worker >= 1, "problem.samples_per_worker must be at least 1");
            ensure!(p.dim >= 1, "problem.dim must be at least 1");
        }
        if let Some(l2) = p.l2_reg {
            ensure!(p.kind.is_logistic(), "l2_reg only applies to logistic problems");
            ensure!(l2 >= 0.0 && l2.is_finite(), "l2_reg must be non-negative, got {l2}");
        }
        if let Some(targets) = &p.target_lms {
            ensure!(!p.kind.is_csv(), "target_lms only applies to synthetic problems");
            ensure!(
                targets.len() == p.workers,
                "target_lms has {} entries for {} workers",
                targets.len(),
                p.workers
            );
        }
        ensure!(self.run.eps >= 0.0 && self.run.eps.is_finite(), "run.eps must be non-negative");
        ensure!(self.run.max_iters >= 1, "run.max_iters must be at least 1");
        ensure!(!self.run.methods.is_empty(), "run.methods must name at least one method");
        ensure!(self.trigger.depth >= 1, "trigger.depth must be at least 1");
        if let Some(xi) = self.trigger.xi {
            ensure!(xi >= 0.0 && xi.is_finite(), "trigger.xi must be non-negative");
        }
        if let Some(alpha) = self.trigger.alpha {
            ensure!(alpha > 0.0 && alpha.is_finite(), "trigger.alpha must be positive");
            ensure!(
                self.trigger.schedule.is_none(),
                "trigger.alpha conflicts with trigger.schedule; the schedule derives its own stepsize"
            );
        }
        Ok(())
    }
}

/// Everything one method needs: its trigger parameters and, when the
/// schedule provides them, Lyapunov weights.
#[derive(Debug, Clone)]
pub struct MethodPlan {
    pub method: Method,
    pub trigger: TriggerParams,
    pub beta: Option<Vec<f64>>,
}

/// Resolves method names into concrete plans. Returns the plans in config
/// order plus warnings for dropped duplicates.
pub fn plan_methods(config: &Config, workers: usize, l_global: f64) -> Result<(Vec<MethodPlan>, Vec<String>)> {
    ensure!(
        l_global > 0.0 && l_global.is_finite(),
        "global smoothness must be positive to derive stepsizes, got {l_global}"
    );
    let t = &config.trigger;
    let depth = t.depth;
    let mut plans = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = Vec::new();
    for name in &config.run.methods {
        let Some(method) = Method::parse(name) else {
            bail!(
                "unknown method {name:?}; expected one of {}",
                Method::ALL.map(|m| m.name()).join(", ")
            );
        };
        if seen.contains(&method) {
            warnings.push(format!("method {name} listed more than once; keeping the first entry"));
            continue;
        }
        seen.push(method);

        let plan = match (method, t.schedule) {
            (Method::CycIag | Method::NumIag, _) => {
                // incremental baselines: one worker per round needs 1/(M L)
                let alpha = t.alpha.unwrap_or(1.0 / (workers as f64 * l_global));
                MethodPlan {
                    method,
                    trigger: TriggerParams::uniform(0.0, depth, alpha, workers)?,
                    beta: None,
                }
            }
            (_, Some(ScheduleKind::Theorem1)) => {
                let xi = t.xi.unwrap_or(1.0 / (2.0 * depth as f64));
                let schedule = schedule_theorem1(xi, depth, l_global)
                    .with_context(|| format!("schedule rejected xi = {xi}, depth = {depth}"))?;
                MethodPlan {
                    method,
                    trigger: TriggerParams::new(schedule.xi, schedule.alpha, workers)?,
                    beta: Some(schedule.beta),
                }
            }
            (Method::Gd, None) => MethodPlan {
                method,
                trigger: TriggerParams::uniform(0.0, depth, t.alpha.unwrap_or(1.0 / l_global), workers)?,
                beta: None,
            },
            (Method::LagWk, None) => {
                let xi = t.xi.unwrap_or(1.0 / depth as f64);
                MethodPlan {
                    method,
                    trigger: TriggerParams::uniform(xi, depth, t.alpha.unwrap_or(1.0 / l_global), workers)?,
                    beta: None,
                }
            }
            (Method::LagPs, None) => {
                let xi = t.xi.unwrap_or(10.0 / depth as f64);
                MethodPlan {
                    method,
                    trigger: TriggerParams::uniform(xi, depth, t.alpha.unwrap_or(1.0 / l_global), workers)?,
                    beta: None,
                }
            }
        };
        plans.push(plan);
    }
    Ok((plans, warnings))
}
