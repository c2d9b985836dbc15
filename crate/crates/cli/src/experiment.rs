//! Builds the distributed problem a config describes, runs each planned
//! method on a fresh copy of it, and condenses the results for emission.

use std::time::Instant;

use anyhow::{Context, Result};
use lagsim_core::analysis::{
    self, comm_bound_with_iterations, gamma_thresholds, heterogeneity_score, solve_reference,
    strong_convexity, HeterogeneityProfile, Reference,
};
use lagsim_core::datagen::{self, CsvSchema, PartitionSpec, SyntheticSpec};
use lagsim_core::engine::{self, uploads_to_reach, RunConfig, RunError, RunOutput};
use lagsim_core::losses::{GlobalSmoothness, LossKind, LossModel, SmoothnessCert};
use lagsim_core::numeric::ModelVector;
use lagsim_core::triggers::TriggerParams;

use crate::config::{MethodPlan, ProblemConfig, ProblemKind, RunSection};

pub struct Problem {
    pub models: Vec<LossModel>,
    pub cert: SmoothnessCert,
    pub mu: Option<f64>,
    pub kappa: Option<f64>,
    pub reference: Reference,
    pub kind: LossKind,
    pub dim: usize,
}

pub fn assemble(p: &ProblemConfig) -> Result<Problem> {
    let models = match p.kind {
        ProblemKind::SyntheticSquare | ProblemKind::SyntheticLogistic => {
            let mut spec = if p.kind.is_logistic() {
                SyntheticSpec::uniform_logistic(p.workers, p.samples_per_worker, p.dim, p.data_seed)
            } else {
                SyntheticSpec::increasing_square(p.workers, p.samples_per_worker, p.dim, p.data_seed)
            };
            if let Some(l2) = p.l2_reg {
                spec.l2_reg = l2;
            }
            if let Some(targets) = &p.target_lms {
                spec.target_lms = targets.clone();
            }
            if let Some(noise) = p.noise {
                spec.noise = noise;
            }
            datagen::gen_synthetic(&spec).context("synthetic data generation failed")?
        }
        ProblemKind::CsvSquare | ProblemKind::CsvLogistic => {
            let path = p.path.as_ref().expect("validated");
            let schema = CsvSchema {
                label_column: p.label_column,
                feature_columns: None,
                binary_labels: p.kind.is_logistic(),
            };
            let (data, _standardization) =
                datagen::load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?;
            let shards = datagen::partition(
                &data,
                &PartitionSpec { workers: p.workers, feature_cap: p.feature_cap, shuffle_seed: p.shuffle_seed },
            )?;
            let kind = if p.kind.is_logistic() { LossKind::Logistic } else { LossKind::Square };
            let l2 = if p.kind.is_logistic() { p.l2_reg.unwrap_or(1e-3) } else { 0.0 };
            shards
                .into_iter()
                .map(|shard| LossModel::new(kind, shard, l2))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let cert = SmoothnessCert::certify(&models, GlobalSmoothness::SummedGram)?;
    let mu = strong_convexity(&models)?;
    let kappa = mu.map(|m| cert.global() / m);
    let reference = solve_reference(&models).context("reference optimum solve failed")?;
    let kind = models[0].kind();
    let dim = models[0].dim();
    Ok(Problem { models, cert, mu, kappa, reference, kind, dim })
}

pub struct MethodOutcome {
    pub output: RunOutput,
    pub diverged: bool,
    /// Failed runtime descent/consistency check, if any.
    pub violation: Option<String>,
    pub wall_ms: Option<u128>,
}

pub fn execute(
    plan: &MethodPlan,
    problem: &Problem,
    run: &RunSection,
    assert_lemmas: bool,
    timings: bool,
) -> Result<MethodOutcome> {
    let theta1 = ModelVector::zeros(problem.dim);
    let mut workers = engine::build_workers(problem.models.clone(), &problem.cert, &theta1)?;
    let config = RunConfig {
        method: plan.method,
        trigger: plan.trigger.clone(),
        max_iters: run.max_iters,
        target_eps: run.eps,
        reference_optimum: problem.reference.objective,
        seed: run.seed,
        assert_lemmas,
        global_smoothness: Some(problem.cert.global()),
        lyapunov_beta: plan.beta.clone(),
    };
    let started = Instant::now();
    let result = engine::run(&config, &mut workers, &theta1);
    let wall_ms = timings.then(|| started.elapsed().as_millis());
    match result {
        Ok(output) => Ok(MethodOutcome { output, diverged: false, violation: None, wall_ms }),
        Err(RunError::Diverged { output, .. }) => {
            Ok(MethodOutcome { output: *output, diverged: true, violation: None, wall_ms })
        }
        Err(e @ (RunError::DescentCheck { .. } | RunError::AggregateDrift { .. })) => Ok(MethodOutcome {
            output: RunOutput {
                trace: Default::default(),
                ledger: Default::default(),
                theta: theta1,
                converged: false,
            },
            diverged: false,
            violation: Some(e.to_string()),
            wall_ms,
        }),
        Err(e) => Err(e).context("run setup failed"),
    }
}

/// A-priori bound diagnostics recorded alongside lazy runs.
pub struct BoundReport {
    pub delta_c: f64,
    /// (1 - delta_c) * M * K at the measured horizon K.
    pub comm_bound_measured: f64,
    /// kappa / (1 - sqrt(D xi)) * ln(err_1 / eps), when the run is strongly
    /// convex with a uniform xi below 1/D.
    pub iteration_bound: Option<f64>,
}

pub fn bound_report(
    problem: &Problem,
    trigger: &TriggerParams,
    eps: f64,
    initial_error: Option<f64>,
    measured_iterations: usize,
) -> Result<BoundReport> {
    let l = problem.cert.global();
    let profile = HeterogeneityProfile::new(problem.cert.per_worker(), l)?;
    let delta_c = heterogeneity_score(&profile, &gamma_thresholds(trigger, l)?);
    let comm_bound_measured = comm_bound_with_iterations(&profile, trigger, l, measured_iterations)?;
    let xi = trigger.xi();
    let uniform = xi.windows(2).all(|w| w[0] == w[1]);
    let iteration_bound = match (problem.kappa, initial_error, uniform) {
        (Some(kappa), Some(err1), true) if err1 > eps && eps > 0.0 => {
            analysis::iteration_complexity_lag(kappa.max(1.0), trigger.depth(), xi[0], eps / err1).ok()
        }
        _ => None,
    };
    Ok(BoundReport { delta_c, comm_bound_measured, iteration_bound })
}

/// First-crossing points of error decades, for plotting uploads against
/// accuracy: thresholds err_1 * 10^-j down to the run target.
pub struct DecadeCrossing {
    pub threshold: f64,
    pub iteration: usize,
    pub uploads: usize,
}

pub fn decade_crossings(output: &RunOutput, eps: f64) -> Vec<DecadeCrossing> {
    let Some(first) = output.trace.rows.first() else {
        return Vec::new();
    };
    let mut crossings = Vec::new();
    let mut threshold = first.objective_error;
    for _ in 0..16 {
        threshold /= 10.0;
        if threshold < eps {
            break;
        }
        match (output.trace.first_within(threshold), uploads_to_reach(&output.trace, &output.ledger, threshold)) {
            (Some(iteration), Some(uploads)) => {
                crossings.push(DecadeCrossing { threshold, iteration, uploads });
            }
            _ => break,
        }
    }
    crossings
}
