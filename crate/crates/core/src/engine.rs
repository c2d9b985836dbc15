//! The parameter-server round loop and its communication accounting.
//!
//! One iteration k: the server holds `theta^k` and an aggregated gradient,
//! workers hold the gradient they last uploaded. A method decides which
//! workers communicate, folds their gradient corrections into the aggregate,
//! and the server takes the step `theta^{k+1} = theta^k - alpha * agg`.
//!
//! * `gd`: everyone recomputes and uploads, aggregate rebuilt from scratch.
//! * `lag_wk` / `lag_ps`: workers upload `delta_m = grad_m(theta^k) -
//!   grad_m(theta_cached)` only when the trigger fires; the aggregate is
//!   patched incrementally and equals `sum_m grad_m(theta_cached_m)` at every
//!   round boundary (re-verified against a full recomputation every 100
//!   iterations).
//! * `cyc_iag` / `num_iag`: exactly one worker per round, cyclic or sampled
//!   with probability proportional to its smoothness constant.
//!
//! The ledger charges only protocol traffic. Diagnostics recorded in the
//! trace (objective error, full gradient norm, Lyapunov value) are computed
//! out of band by the simulator and are free.
//!
//! An initialization round (ledger iteration 0) uploads every worker's
//! gradient at `theta^1` and charges M uploads + M downloads, so the lazy
//! methods start from caches that are exactly in sync.
//!
//! With `assert_lemmas` the loop verifies the descent guarantees after every
//! step, to absolute tolerance `DESCENT_TOL`:
//!
//! * gd:  `L(theta^{k+1}) - L(theta^k) <= -(alpha - alpha^2 L / 2) ||grad||^2`
//! * lazy: `... <= -(alpha/2) ||grad||^2 + (alpha/2) ||staleness||^2
//!   + (L/2 - 1/(2 alpha)) ||theta^{k+1} - theta^k||^2`, where `staleness`
//!   is the summed gradient error of the workers that skipped
//! * with Lyapunov weights beta: `V^{k+1} <= V^k` for gd and the lazy
//!   variants, where `V^k = L(theta^k) - L* + sum_d beta_d w_d`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::splitmix;
use crate::losses::{LossError, LossModel, SmoothnessCert};
use crate::numeric::{self, ModelVector, NumericsError};
use crate::triggers::{self, LagWindow, TriggerError, TriggerParams};

/// Absolute slack for the runtime descent and Lyapunov assertions.
pub const DESCENT_TOL: f64 = 1e-9;
/// The lazy aggregate is checked against a full recomputation this often.
const AGG_CHECK_EVERY: usize = 100;
/// Relative tolerance (with absolute floor 1) for that aggregate check.
const AGG_DRIFT_TOL: f64 = 1e-9;
/// Objective error growing by this factor over its initial value aborts the run.
const DIVERGE_FACTOR: f64 = 1e6;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("run diverged at iteration {iteration} (objective error {error}); partial trace retained")]
    Diverged { iteration: usize, error: f64, output: Box<RunOutput> },
    #[error("{check} violated at iteration {iteration}: lhs {lhs} > rhs {rhs} + {DESCENT_TOL}")]
    DescentCheck { check: &'static str, iteration: usize, lhs: f64, rhs: f64 },
    #[error("lazy aggregate drifted from the cached-gradient sum at iteration {iteration}: {drift}")]
    AggregateDrift { iteration: usize, drift: f64 },
    #[error("no workers")]
    NoWorkers,
    #[error("max_iters must be at least 1")]
    MaxItersZero,
    #[error("target_eps must be non-negative and finite, got {0}")]
    EpsInvalid(f64),
    #[error("trigger params expect {params} workers, got {workers}")]
    WorkerCount { params: usize, workers: usize },
    #[error("descent assertions need the global smoothness constant")]
    MissingSmoothness,
    #[error("lyapunov weights have {got} entries, expected trigger depth {expected}")]
    BetaLength { expected: usize, got: usize },
    #[error("server state was initialized without per-worker iterate copies")]
    MissingWorkerCopies,
    #[error("worker importance weights sum to zero; cannot sample")]
    WeightsNotPositive,
    #[error("smoothness cert covers {cert} workers, got {workers} models")]
    CertLength { cert: usize, workers: usize },
}

/// The five update rules the simulator knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Gd,
    LagWk,
    LagPs,
    CycIag,
    NumIag,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Gd, Method::LagWk, Method::LagPs, Method::CycIag, Method::NumIag];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gd => "gd",
            Method::LagWk => "lag_wk",
            Method::LagPs => "lag_ps",
            Method::CycIag => "cyc_iag",
            Method::NumIag => "num_iag",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Methods driven by the lazy-upload triggers.
    pub fn is_lazy(self) -> bool {
        matches!(self, Method::LagWk | Method::LagPs)
    }
}

/// One worker: its local loss, certified smoothness, and the iterate/gradient
/// pair it last uploaded. `cached_grad` always equals
/// `model.loss_grad(cached_theta)`.
#[derive(Debug, Clone)]
pub struct WorkerNode {
    id: usize, // 1-based
    model: LossModel,
    lipschitz: f64,
    cached_theta: ModelVector,
    cached_grad: ModelVector,
}

impl WorkerNode {
    pub fn new(id: usize, model: LossModel, lipschitz: f64, theta: &ModelVector) -> Result<Self, RunError> {
        let cached_grad = model.loss_grad(theta)?;
        Ok(Self { id, model, lipschitz, cached_theta: theta.clone(), cached_grad })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn model(&self) -> &LossModel {
        &self.model
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn cached_theta(&self) -> &ModelVector {
        &self.cached_theta
    }

    pub fn cached_grad(&self) -> &ModelVector {
        &self.cached_grad
    }

    fn set_cache(&mut self, theta: ModelVector, grad: ModelVector) {
        self.cached_theta = theta;
        self.cached_grad = grad;
    }
}

/// Builds the worker set with ids 1..=M from models and their certificates.
pub fn build_workers(
    models: Vec<LossModel>,
    cert: &SmoothnessCert,
    theta1: &ModelVector,
) -> Result<Vec<WorkerNode>, RunError> {
    if models.is_empty() {
        return Err(RunError::NoWorkers);
    }
    if cert.workers() != models.len() {
        return Err(RunError::CertLength { cert: cert.workers(), workers: models.len() });
    }
    models
        .into_iter()
        .enumerate()
        .map(|(i, model)| WorkerNode::new(i + 1, model, cert.worker(i), theta1))
        .collect()
}

/// Server side: current iterate, lazily patched aggregate, the lag window of
/// recent squared iterate differences, and (server-triggered variant only)
/// per-worker copies of the last iterate each worker evaluated.
#[derive(Debug, Clone)]
pub struct ServerState {
    theta: ModelVector,
    agg_grad: ModelVector,
    window: LagWindow,
    worker_thetas: Option<Vec<ModelVector>>,
    iteration: usize, // index of the next update round, 1-based
}

impl ServerState {
    pub fn theta(&self) -> &ModelVector {
        &self.theta
    }

    pub fn agg_grad(&self) -> &ModelVector {
        &self.agg_grad
    }

    pub fn window(&self) -> &LagWindow {
        &self.window
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn worker_copies(&self) -> Option<&[ModelVector]> {
        self.worker_thetas.as_deref()
    }

    /// theta <- theta - alpha * agg, recording the squared movement.
    fn advance(&mut self, alpha: f64) -> Result<(), NumericsError> {
        let next = numeric::axpy(-alpha, &self.agg_grad, &self.theta)?;
        let diff = next.sub(&self.theta)?;
        self.window.push(numeric::sq_norm(&diff));
        self.theta = next;
        self.iteration += 1;
        Ok(())
    }
}

/// Communication of one round: which workers uploaded a gradient correction,
/// which received the iterate, and which ran a gradient evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub iteration: usize,
    pub uploads: Vec<usize>,
    pub downloads: Vec<usize>,
    pub grad_evals: Vec<usize>,
}

/// Append-only per-iteration communication record. Entry i describes
/// iteration i; entry 0 is the initialization round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    cum_uploads: usize,
    cum_downloads: usize,
    cum_grad_evals: usize,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, entry: LedgerEntry) {
        self.cum_uploads += entry.uploads.len();
        self.cum_downloads += entry.downloads.len();
        self.cum_grad_evals += entry.grad_evals.len();
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn cum_uploads(&self) -> usize {
        self.cum_uploads
    }

    pub fn cum_downloads(&self) -> usize {
        self.cum_downloads
    }

    pub fn cum_grad_evals(&self) -> usize {
        self.cum_grad_evals
    }

    /// Uploads excluding the initialization round.
    pub fn uploads_without_init(&self) -> usize {
        let init = self.entries.first().map_or(0, |e| e.uploads.len());
        self.cum_uploads - init
    }

    /// Total uploads recorded through the given iteration, inclusive.
    pub fn uploads_through(&self, iteration: usize) -> usize {
        self.entries
            .iter()
            .take_while(|e| e.iteration <= iteration)
            .map(|e| e.uploads.len())
            .sum()
    }

    /// Upload counts per worker id (1-based), initialization included.
    pub fn per_worker_uploads(&self, workers: usize) -> Vec<usize> {
        let mut counts = vec![0usize; workers];
        for e in &self.entries {
            for &id in &e.uploads {
                counts[id - 1] += 1;
            }
        }
        counts
    }
}

/// One trace row describes the state *at* `theta^k`: its objective error and
/// full squared gradient norm, plus cumulative uploads recorded so far
/// (through iteration k, or through k-1 on the final converged row, which
/// performs no update).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective_error: f64,
    pub grad_sq_norm: f64,
    pub cum_uploads: usize,
    pub lyapunov: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
}

impl Trace {
    /// First iterate index whose objective error is within eps.
    pub fn first_within(&self, eps: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.objective_error <= eps).map(|r| r.iteration)
    }

    /// Number of update steps taken before the error first dipped within eps
    /// (the iterate theta^k costs k-1 updates).
    pub fn iterations_to_reach(&self, eps: f64) -> Option<usize> {
        self.first_within(eps).map(|k| k - 1)
    }
}

/// Uploads charged before the first iterate within eps was formed
/// (initialization round included).
pub fn uploads_to_reach(trace: &Trace, ledger: &CommLedger, eps: f64) -> Option<usize> {
    trace.first_within(eps).map(|k| ledger.uploads_through(k - 1))
}

/// Full description of one run. `trigger.alpha` is the stepsize for every
/// method; depth and xi only steer the lazy variants.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Method,
    pub trigger: TriggerParams,
    pub max_iters: usize,
    pub target_eps: f64,
    /// Reference optimum L*; objective errors in the trace are relative to it.
    pub reference_optimum: f64,
    pub seed: u64,
    /// Verify the descent inequalities after every step (roughly doubles the
    /// per-iteration cost).
    pub assert_lemmas: bool,
    /// Global smoothness constant L; required by the descent assertions.
    pub global_smoothness: Option<f64>,
    /// Lyapunov weights beta_d; enables V^k tracking in the trace and, under
    /// `assert_lemmas`, the monotonicity check for gd and the lazy methods.
    pub lyapunov_beta: Option<Vec<f64>>,
}

impl RunConfig {
    fn validate(&self, workers: &[WorkerNode]) -> Result<(), RunError> {
        if workers.is_empty() {
            return Err(RunError::NoWorkers);
        }
        if self.trigger.workers() != workers.len() {
            return Err(RunError::WorkerCount { params: self.trigger.workers(), workers: workers.len() });
        }
        if self.max_iters == 0 {
            return Err(RunError::MaxItersZero);
        }
        if !(self.target_eps >= 0.0) || !self.target_eps.is_finite() {
            return Err(RunError::EpsInvalid(self.target_eps));
        }
        if self.assert_lemmas && self.global_smoothness.is_none() {
            return Err(RunError::MissingSmoothness);
        }
        if let Some(beta) = &self.lyapunov_beta {
            if beta.len() != self.trigger.depth() {
                return Err(RunError::BetaLength { expected: self.trigger.depth(), got: beta.len() });
            }
        }
        Ok(())
    }
}

/// Everything a finished (or aborted) run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub ledger: CommLedger,
    pub theta: ModelVector,
    pub converged: bool,
}

/// Per-worker gradients at theta, in worker order.
pub fn eval_gradients_seq(workers: &[WorkerNode], theta: &ModelVector) -> Result<Vec<ModelVector>, LossError> {
    workers.iter().map(|w| w.model.loss_grad(theta)).collect()
}

/// Parallel fan-out over workers; results stay in worker order, so every
/// reduction downstream is bit-identical to the sequential path.
#[cfg(feature = "parallel")]
pub fn eval_gradients_par(workers: &[WorkerNode], theta: &ModelVector) -> Result<Vec<ModelVector>, LossError> {
    use rayon::prelude::*;
    workers.par_iter().map(|w| w.model.loss_grad(theta)).collect()
}

pub fn eval_gradients(workers: &[WorkerNode], theta: &ModelVector) -> Result<Vec<ModelVector>, LossError> {
    #[cfg(feature = "parallel")]
    {
        eval_gradients_par(workers, theta)
    }
    #[cfg(not(feature = "parallel"))]
    {
        eval_gradients_seq(workers, theta)
    }
}

fn eval_gradients_subset(
    workers: &[WorkerNode],
    subset: &[usize],
    theta: &ModelVector,
) -> Result<Vec<ModelVector>, LossError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        subset.par_iter().map(|&i| workers[i].model.loss_grad(theta)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        subset.iter().map(|&i| workers[i].model.loss_grad(theta)).collect()
    }
}

/// sum_m L_m(theta), reduced in worker order.
pub fn objective_value(workers: &[WorkerNode], theta: &ModelVector) -> Result<f64, LossError> {
    let values: Vec<f64>;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        values = workers.par_iter().map(|w| w.model.loss_value(theta)).collect::<Result<_, _>>()?;
    }
    #[cfg(not(feature = "parallel"))]
    {
        values = workers.iter().map(|w| w.model.loss_value(theta)).collect::<Result<_, _>>()?;
    }
    Ok(values.iter().sum())
}

/// Fold in input order.
pub fn sum_gradients(grads: &[ModelVector]) -> Result<ModelVector, NumericsError> {
    let dim = grads.first().map_or(0, ModelVector::dim);
    let mut total = ModelVector::zeros(dim);
    for g in grads {
        total.add_assign_vec(g)?;
    }
    Ok(total)
}

fn all_ids(workers: &[WorkerNode]) -> Vec<usize> {
    workers.iter().map(|w| w.id).collect()
}

fn check_worker_count(params: &TriggerParams, workers: &[WorkerNode]) -> Result<(), RunError> {
    if params.workers() != workers.len() {
        return Err(RunError::WorkerCount { params: params.workers(), workers: workers.len() });
    }
    Ok(())
}

/// Initialization round: every worker evaluates at theta^1 and uploads, the
/// server aggregates in worker order and zero-fills the lag window. Charged
/// as ledger iteration 0 with M uploads, M downloads, M evaluations.
pub fn init_round(
    workers: &mut [WorkerNode],
    theta1: &ModelVector,
    method: Method,
    depth: usize,
) -> Result<(ServerState, LedgerEntry), RunError> {
    if workers.is_empty() {
        return Err(RunError::NoWorkers);
    }
    let grads = eval_gradients(workers, theta1)?;
    for (w, g) in workers.iter_mut().zip(&grads) {
        w.set_cache(theta1.clone(), g.clone());
    }
    let agg_grad = sum_gradients(&grads)?;
    let worker_thetas = matches!(method, Method::LagPs).then(|| vec![theta1.clone(); workers.len()]);
    let server = ServerState {
        theta: theta1.clone(),
        agg_grad,
        window: LagWindow::new(depth)?,
        worker_thetas,
        iteration: 1,
    };
    let entry = LedgerEntry {
        iteration: 0,
        uploads: all_ids(workers),
        downloads: all_ids(workers),
        grad_evals: all_ids(workers),
    };
    Ok((server, entry))
}

/// Full gradient descent round: every worker downloads, recomputes, uploads;
/// the aggregate is rebuilt from the fresh gradients.
pub fn step_gd(server: &mut ServerState, workers: &mut [WorkerNode], alpha: f64) -> Result<LedgerEntry, RunError> {
    let theta = server.theta.clone();
    let grads = eval_gradients(workers, &theta)?;
    server.agg_grad = sum_gradients(&grads)?;
    for (w, g) in workers.iter_mut().zip(grads) {
        w.set_cache(theta.clone(), g);
    }
    let entry = LedgerEntry {
        iteration: server.iteration,
        uploads: all_ids(workers),
        downloads: all_ids(workers),
        grad_evals: all_ids(workers),
    };
    server.advance(alpha)?;
    Ok(entry)
}

/// Worker-triggered lazy round: the iterate is broadcast (M downloads), every
/// worker evaluates its fresh gradient (M evaluations), but only workers whose
/// measured gradient change beats the threshold upload a correction.
pub fn step_lag_wk(
    server: &mut ServerState,
    workers: &mut [WorkerNode],
    params: &TriggerParams,
) -> Result<LedgerEntry, RunError> {
    check_worker_count(params, workers)?;
    let theta = server.theta.clone();
    let fresh = eval_gradients(workers, &theta)?;
    let mut uploads = Vec::new();
    for (i, w) in workers.iter_mut().enumerate() {
        let skip = triggers::wk_should_skip(&w.cached_grad, &fresh[i], &server.window, params)?;
        if !skip {
            let delta = fresh[i].sub(&w.cached_grad)?;
            server.agg_grad.add_assign_vec(&delta)?;
            w.set_cache(theta.clone(), fresh[i].clone());
            uploads.push(w.id);
        }
    }
    let entry = LedgerEntry {
        iteration: server.iteration,
        uploads,
        downloads: all_ids(workers),
        grad_evals: all_ids(workers),
    };
    server.advance(params.alpha())?;
    Ok(entry)
}

/// Server-triggered lazy round: the server decides from its per-worker
/// iterate copies and each worker's smoothness bound; only contacted workers
/// download, evaluate, and upload.
pub fn step_lag_ps(
    server: &mut ServerState,
    workers: &mut [WorkerNode],
    params: &TriggerParams,
) -> Result<LedgerEntry, RunError> {
    check_worker_count(params, workers)?;
    let theta = server.theta.clone();
    let mut violators = Vec::new();
    {
        let copies = server.worker_thetas.as_ref().ok_or(RunError::MissingWorkerCopies)?;
        for (i, w) in workers.iter().enumerate() {
            let skip = triggers::ps_should_skip(&copies[i], &theta, w.lipschitz, &server.window, params)?;
            if !skip {
                violators.push(i);
            }
        }
    }
    let fresh = eval_gradients_subset(workers, &violators, &theta)?;
    let copies = server.worker_thetas.as_mut().expect("checked above");
    let mut uploads = Vec::with_capacity(violators.len());
    for (g, &i) in fresh.into_iter().zip(&violators) {
        let w = &mut workers[i];
        let delta = g.sub(&w.cached_grad)?;
        server.agg_grad.add_assign_vec(&delta)?;
        w.set_cache(theta.clone(), g);
        copies[i] = theta.clone();
        uploads.push(w.id);
    }
    let entry = LedgerEntry {
        iteration: server.iteration,
        uploads: uploads.clone(),
        downloads: uploads.clone(),
        grad_evals: uploads,
    };
    server.advance(params.alpha())?;
    Ok(entry)
}

fn step_one_worker(
    server: &mut ServerState,
    workers: &mut [WorkerNode],
    alpha: f64,
    index: usize,
) -> Result<LedgerEntry, RunError> {
    let theta = server.theta.clone();
    let w = &mut workers[index];
    let g = w.model.loss_grad(&theta)?;
    let delta = g.sub(&w.cached_grad)?;
    server.agg_grad.add_assign_vec(&delta)?;
    w.set_cache(theta, g);
    let ids = vec![w.id];
    let entry = LedgerEntry {
        iteration: server.iteration,
        uploads: ids.clone(),
        downloads: ids.clone(),
        grad_evals: ids,
    };
    server.advance(alpha)?;
    Ok(entry)
}

/// Incremental aggregation with cyclic worker selection: worker
/// `((k - 1) mod M) + 1` refreshes at iteration k, uploading even when its
/// correction is zero.
pub fn step_cyc_iag(server: &mut ServerState, workers: &mut [WorkerNode], alpha: f64) -> Result<LedgerEntry, RunError> {
    if workers.is_empty() {
        return Err(RunError::NoWorkers);
    }
    let index = (server.iteration - 1) % workers.len();
    step_one_worker(server, workers, alpha, index)
}

/// Uniform draw for iteration k, keyed on (seed, k) so any round can be
/// replayed without replaying its predecessors.
pub fn worker_draw(seed: u64, iteration: usize) -> f64 {
    let key = splitmix(splitmix(seed).wrapping_add(iteration as u64));
    ChaCha8Rng::seed_from_u64(key).random::<f64>()
}

/// Maps a uniform draw to a worker index with probability proportional to
/// the weights.
pub fn select_worker_proportional(weights: &[f64], u: f64) -> Result<usize, RunError> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(RunError::WeightsNotPositive);
    }
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

/// Incremental aggregation with one worker sampled per round, proportional
/// to its smoothness constant.
pub fn step_num_iag(
    server: &mut ServerState,
    workers: &mut [WorkerNode],
    alpha: f64,
    seed: u64,
) -> Result<LedgerEntry, RunError> {
    if workers.is_empty() {
        return Err(RunError::NoWorkers);
    }
    let weights: Vec<f64> = workers.iter().map(|w| w.lipschitz).collect();
    let index = select_worker_proportional(&weights, worker_draw(seed, server.iteration))?;
    step_one_worker(server, workers, alpha, index)
}

fn non_finite_to_divergence(err: RunError, iteration: usize, output: RunOutput) -> RunError {
    match err {
        RunError::Loss(LossError::Numerics(NumericsError::NonFinite { .. }))
        | RunError::Numerics(NumericsError::NonFinite { .. }) => RunError::Diverged {
            iteration,
            error: f64::INFINITY,
            output: Box::new(output),
        },
        other => other,
    }
}

/// Runs one method from theta^1 until the objective error is within
/// `target_eps` or `max_iters` rounds elapse. Trace row k is recorded at
/// theta^k; on convergence the final row is appended without stepping.
pub fn run(config: &RunConfig, workers: &mut [WorkerNode], theta1: &ModelVector) -> Result<RunOutput, RunError> {
    config.validate(workers)?;
    let alpha = config.trigger.alpha();
    let (mut server, init_entry) = init_round(workers, theta1, config.method, config.trigger.depth())?;
    let mut ledger = CommLedger::new();
    ledger.record(init_entry);

    let mut rows: Vec<TraceRow> = Vec::new();
    let mut converged = false;
    let mut initial_err: Option<f64> = None;
    let mut prev_lyapunov: Option<f64> = None;

    while server.iteration <= config.max_iters {
        let k = server.iteration;
        let obj = objective_value(workers, &server.theta)?;
        let err = obj - config.reference_optimum;

        let partial = |rows: &Vec<TraceRow>, ledger: &CommLedger, server: &ServerState| RunOutput {
            trace: Trace { rows: rows.clone(), converged: false },
            ledger: ledger.clone(),
            theta: server.theta().clone(),
            converged: false,
        };

        if !err.is_finite() {
            return Err(RunError::Diverged { iteration: k, error: err, output: Box::new(partial(&rows, &ledger, &server)) });
        }
        match initial_err {
            None => initial_err = Some(err),
            Some(e1) => {
                if err > DIVERGE_FACTOR * e1.max(1e-12) {
                    return Err(RunError::Diverged { iteration: k, error: err, output: Box::new(partial(&rows, &ledger, &server)) });
                }
            }
        }

        let grads = match eval_gradients(workers, &server.theta) {
            Ok(g) => g,
            Err(e) => return Err(non_finite_to_divergence(e.into(), k, partial(&rows, &ledger, &server))),
        };
        let full_grad = sum_gradients(&grads)?;
        let grad_sq_norm = numeric::sq_norm(&full_grad);

        let lyapunov = match &config.lyapunov_beta {
            Some(beta) => {
                let weighted: f64 = beta.iter().zip(server.window.iter()).map(|(b, w)| b * w).sum();
                Some(err + weighted)
            }
            None => None,
        };
        // V is only guaranteed monotone for the methods the schedule covers
        if config.assert_lemmas && !matches!(config.method, Method::CycIag | Method::NumIag) {
            if let (Some(prev), Some(cur)) = (prev_lyapunov, lyapunov) {
                if cur > prev + DESCENT_TOL {
                    return Err(RunError::DescentCheck { check: "lyapunov non-increase", iteration: k, lhs: cur, rhs: prev });
                }
            }
        }
        prev_lyapunov = lyapunov;

        if err <= config.target_eps {
            rows.push(TraceRow { iteration: k, objective_error: err, grad_sq_norm, cum_uploads: ledger.cum_uploads(), lyapunov });
            converged = true;
            break;
        }

        // the lazily patched aggregate must still equal the cached-gradient sum
        if k % AGG_CHECK_EVERY == 0 {
            let recomputed = sum_gradients(&workers.iter().map(|w| w.cached_grad.clone()).collect::<Vec<_>>())?;
            let drift = numeric::sq_norm(&server.agg_grad.sub(&recomputed)?).sqrt();
            let scale = 1.0 + numeric::sq_norm(&recomputed).sqrt();
            if drift > AGG_DRIFT_TOL * scale {
                return Err(RunError::AggregateDrift { iteration: k, drift });
            }
        }

        let step_result = match config.method {
            Method::Gd => step_gd(&mut server, workers, alpha),
            Method::LagWk => step_lag_wk(&mut server, workers, &config.trigger),
            Method::LagPs => step_lag_ps(&mut server, workers, &config.trigger),
            Method::CycIag => step_cyc_iag(&mut server, workers, alpha),
            Method::NumIag => step_num_iag(&mut server, workers, alpha, config.seed),
        };
        let entry = match step_result {
            Ok(entry) => entry,
            Err(e) => return Err(non_finite_to_divergence(e, k, partial(&rows, &ledger, &server))),
        };

        if config.assert_lemmas {
            let l = config.global_smoothness.expect("validated");
            let obj_after = objective_value(workers, &server.theta)?;
            let decrease = obj_after - obj;
            match config.method {
                Method::Gd => {
                    let bound = -(alpha - alpha * alpha * l / 2.0) * grad_sq_norm;
                    if decrease > bound + DESCENT_TOL {
                        return Err(RunError::DescentCheck { check: "gd descent", iteration: k, lhs: decrease, rhs: bound });
                    }
                }
                Method::LagWk | Method::LagPs => {
                    // staleness = agg^k - grad(theta^k): the summed gradient
                    // error of the workers that skipped this round
                    let staleness = server.agg_grad.sub(&full_grad)?;
                    let movement = server.window.newest();
                    let bound = -(alpha / 2.0) * grad_sq_norm
                        + (alpha / 2.0) * numeric::sq_norm(&staleness)
                        + (l / 2.0 - 1.0 / (2.0 * alpha)) * movement;
                    if decrease > bound + DESCENT_TOL {
                        return Err(RunError::DescentCheck { check: "lazy descent", iteration: k, lhs: decrease, rhs: bound });
                    }
                }
                Method::CycIag | Method::NumIag => {}
            }
        }

        ledger.record(entry);
        rows.push(TraceRow { iteration: k, objective_error: err, grad_sq_norm, cum_uploads: ledger.cum_uploads(), lyapunov });
    }

    Ok(RunOutput {
        trace: Trace { rows, converged },
        ledger,
        theta: server.theta().clone(),
        converged,
    })
}
