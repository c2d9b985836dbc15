//! `lagsim`: runs a configured family of distributed gradient methods on one
//! problem and writes a trace, a communication ledger, an upload event log,
//! and a JSON summary per method.
//!
//! Exit codes: 0 success, 1 a runtime descent/consistency check failed,
//! 2 bad configuration or problem setup, 3 a run diverged (partial artifacts
//! are still written), 4 output io failure.

use lagsim_cli::{config, emit, experiment};

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;

use lagsim_cli::config::{Config, MethodPlan};
use lagsim_cli::experiment::{MethodOutcome, Problem};

#[derive(Debug, Parser)]
#[command(name = "lagsim", version, about = "Simulate lazily aggregated gradient methods")]
struct Cli {
    /// TOML experiment description.
    config: PathBuf,
    /// Override [run].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override [run].output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Check the descent inequalities after every round (roughly doubles
    /// per-iteration work).
    #[arg(long)]
    assert_lemmas: bool,
    /// Count the initialization broadcast in headline upload totals (default).
    #[arg(long, overrides_with = "without_init")]
    with_init: bool,
    /// Report headline uploads without the initialization broadcast.
    #[arg(long, overrides_with = "with_init")]
    without_init: bool,
    /// Record wall-clock time per method; off by default so repeated runs
    /// stay byte-identical.
    #[arg(long)]
    timings: bool,
}

fn main() -> ExitCode {
    ExitCode::from(run_cli())
}

/// Severity order for the final exit code: check failures trump divergence.
fn escalate(current: u8, new: u8) -> u8 {
    let rank = |c: u8| match c {
        1 => 2,
        3 => 1,
        _ => 0,
    };
    if rank(new) > rank(current) {
        new
    } else {
        current
    }
}


fn run_cli() -> u8 {
    let cli = Cli::parse();
    let text = match fs::read_to_string(&cli.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", cli.config.display());
            return 2;
        }
    };
    let mut cfg = match config::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    let out_dir = cli
        .output_dir
        .clone()
        .or_else(|| cfg.run.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("lagsim-out"));

    let problem = match experiment::assemble(&cfg.problem) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    let (plans, warnings) = match config::plan_methods(&cfg, problem.models.len(), problem.cert.global()) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return 2;
        }
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    if let Err(e) = fs::create_dir_all(&out_dir) {
        eprintln!("error: cannot create {}: {e}", out_dir.display());
        return 4;
    }

    let headline_includes_init = !cli.without_init;
    let mut code = 0u8;
    for plan in &plans {
        let outcome = match experiment::execute(plan, &problem, &cfg.run, cli.assert_lemmas, cli.timings) {
            Ok(o) => o,
            Err(e) => {
                eprintln!("error: {e:#}");
                return 2;
            }
        };
        if let Err(e) = write_method_artifacts(&out_dir, plan, &problem, &cfg, &outcome, headline_includes_init) {
            eprintln!("error: writing artifacts for {}: {e:#}", plan.method.name());
            return 4;
        }
        report(plan, &outcome, headline_includes_init);
        if outcome.violation.is_some() {
            code = escalate(code, 1);
        } else if outcome.diverged {
            code = escalate(code, 3);
        }
    }
    code
}

fn report(plan: &MethodPlan, outcome: &MethodOutcome, with_init: bool) {
    let name = plan.method.name();
    if let Some(v) = &outcome.violation {
        println!("{name}: FAILED {v}");
        return;
    }
    let uploads = if with_init {
        outcome.output.ledger.cum_uploads()
    } else {
        outcome.output.ledger.uploads_without_init()
    };
    let iterations = outcome.output.ledger.entries().len().saturating_sub(1);
    let err = outcome.output.trace.rows.last().map(|r| r.objective_error);
    let status = if outcome.diverged {
        "diverged"
    } else if outcome.output.converged {
        "converged"
    } else {
        "stopped at max_iters"
    };
    match err {
        Some(e) => println!("{name}: {status} after {iterations} rounds, error {e:.3e}, uploads {uploads}"),
        None => println!("{name}: {status} after {iterations} rounds, uploads {uploads}"),
    }
}

fn write_method_artifacts(
    out_dir: &Path,
    plan: &MethodPlan,
    problem: &Problem,
    cfg: &Config,
    outcome: &MethodOutcome,
    headline_includes_init: bool,
) -> Result<()> {
    let name = plan.method.name();
    let output = &outcome.output;
    emit::write_trace(&out_dir.join(format!("{name}_trace.csv")), &output.trace)?;
    emit::write_ledger(&out_dir.join(format!("{name}_ledger.csv")), &output.ledger, problem.models.len())?;
    emit::write_events(&out_dir.join(format!("{name}_events.csv")), &output.ledger)?;

    let eps = cfg.run.eps;
    let initial_error = output.trace.rows.first().map(|r| r.objective_error);
    let iterations = output.ledger.entries().len().saturating_sub(1);
    let bounds = if plan.method.is_lazy() {
        experiment::bound_report(problem, &plan.trigger, eps, initial_error, iterations)
            .ok()
            .map(|b| emit::BoundsReport {
                delta_c: b.delta_c,
                comm_bound_measured: b.comm_bound_measured,
                iteration_bound: b.iteration_bound,
            })
    } else {
        None
    };
    let decades = experiment::decade_crossings(output, eps)
        .into_iter()
        .map(|d| emit::DecadeRow { threshold: d.threshold, iteration: d.iteration, uploads: d.uploads })
        .collect();

    let summary = emit::Summary {
        schema: emit::SUMMARY_SCHEMA,
        method: plan.method.name(),
        converged: output.converged,
        diverged: outcome.diverged,
        violation: outcome.violation.clone(),
        iterations,
        final_error: output.trace.rows.last().map(|r| r.objective_error),
        headline_uploads: if headline_includes_init {
            output.ledger.cum_uploads()
        } else {
            output.ledger.uploads_without_init()
        },
        headline_includes_init,
        uploads_total: output.ledger.cum_uploads(),
        uploads_without_init: output.ledger.uploads_without_init(),
        downloads_total: output.ledger.cum_downloads(),
        grad_evals_total: output.ledger.cum_grad_evals(),
        per_worker_uploads: output.ledger.per_worker_uploads(problem.models.len()),
        iterations_to_target: output.trace.iterations_to_reach(eps),
        uploads_to_target: lagsim_core::engine::uploads_to_reach(&output.trace, &output.ledger, eps),
        decades,
        problem: emit::ProblemReport {
            loss: match problem.kind {
                lagsim_core::losses::LossKind::Square => "square",
                lagsim_core::losses::LossKind::Logistic => "logistic",
            },
            workers: problem.models.len(),
            dim: problem.dim,
            l_global: problem.cert.global(),
            per_worker_l: problem.cert.per_worker().to_vec(),
            mu: problem.mu,
            kappa: problem.kappa,
            reference_optimum: problem.reference.objective,
            reference_grad_norm: problem.reference.grad_norm,
        },
        trigger: emit::TriggerReport {
            alpha: plan.trigger.alpha(),
            depth: plan.trigger.depth(),
            xi: plan.trigger.xi().to_vec(),
            beta: plan.beta.clone(),
        },
        bounds,
        wall_time_ms: outcome.wall_ms,
    };
    emit::write_summary(&out_dir.join(format!("{name}_summary.json")), &summary)?;
    Ok(())
}
