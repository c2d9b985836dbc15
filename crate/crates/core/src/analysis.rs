//! A-priori complexity bounds, the heterogeneity metric that predicts how
//! much communication lazy aggregation saves, and reference-optimum solvers.
//!
//! The key quantity is the per-worker smoothness ratio `H(m) = L_m / L`.
//! A worker whose `H(m)^2` falls below the lag-d threshold
//! `gamma_d = xi_d / (d alpha^2 L^2 M^2)` provably cannot upload more often
//! than every `d+1` rounds, so the fraction of workers below each threshold,
//! `h(gamma) = |{m : H(m)^2 <= gamma}| / M`, converts directly into a
//! communication discount: uploads over K rounds are at most
//! `(1 - delta_c) * M * K`, where
//! `delta_c = sum_d (1/d - 1/(d+1)) h(gamma_d)`.
//!
//! Everything here is recomputed from first principles, independent of the
//! engine's bookkeeping, so runs can be checked against theory after the
//! fact: the Lyapunov value from an iterate history, the descent-schedule
//! thresholds, the iteration and communication bounds, and the reference
//! optimum that objective errors are measured against.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::losses::{self, LossError, LossKind, LossModel};
use crate::numeric::{self, ModelVector, NumericsError};
use crate::triggers::TriggerParams;

/// Accepted residual for the quadratic reference: ||grad|| <= this * (1 + ||b||).
const REF_GRAD_TOL: f64 = 1e-8;
/// Newton stops when ||grad|| <= this * (1 + |initial objective|).
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 200;
/// Reference solves restarted from a second point must agree this closely.
const TWO_START_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no workers")]
    NoWorkers,
    #[error("empty iterate history")]
    EmptyHistory,
    #[error("{name} must be positive and finite, got {value}")]
    BadConstant { name: &'static str, value: f64 },
    #[error("condition number must be at least 1, got {0}")]
    KappaInvalid(f64),
    #[error("this bound assumes one uniform xi across lags")]
    NonUniformXi,
    #[error("depth * xi must stay below 1, got {0}")]
    XiWindowTooLarge(f64),
    #[error("xi entries must sum below 1, got {0}")]
    XiSumTooLarge(f64),
    #[error("profile covers {profile} workers but params expect {params}")]
    WorkerMismatch { profile: usize, params: usize },
    #[error("workers must share one loss kind")]
    MixedKinds,
    #[error("logistic reference needs a positive l2 term to pin the optimum")]
    NotStronglyConvex,
    #[error("reference solve stalled after {iters} iterations with gradient norm {grad_norm}")]
    NoConvergence { iters: usize, grad_norm: f64 },
    #[error("reference solves from two starts disagree by {distance}")]
    SolverDisagreement { distance: f64 },
    #[error("linear solve failed: {0}")]
    LinearSolve(&'static str),
}

/// Smoothness ratios H(m) = L_m / L in worker order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityProfile {
    ratios: Vec<f64>,
}

impl HeterogeneityProfile {
    pub fn new(per_worker: &[f64], l_global: f64) -> Result<Self, AnalysisError> {
        if per_worker.is_empty() {
            return Err(AnalysisError::NoWorkers);
        }
        if !(l_global > 0.0) || !l_global.is_finite() {
            return Err(AnalysisError::BadConstant { name: "global smoothness", value: l_global });
        }
        for &lm in per_worker {
            if !(lm >= 0.0) || !lm.is_finite() {
                return Err(AnalysisError::BadConstant { name: "worker smoothness", value: lm });
            }
        }
        Ok(Self { ratios: per_worker.iter().map(|lm| lm / l_global).collect() })
    }

    pub fn workers(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    /// h(gamma): the fraction of workers with H(m)^2 <= gamma.
    pub fn fraction_below(&self, gamma: f64) -> f64 {
        let hits = self.ratios.iter().filter(|r| *r * *r <= gamma).count();
        hits as f64 / self.ratios.len() as f64
    }
}

/// Lag-d skip thresholds gamma_d = xi_d / (d alpha^2 L^2 M^2), d = 1..=D.
/// A worker with H(m)^2 <= gamma_d uploads at most every d+1 rounds.
pub fn gamma_thresholds(params: &TriggerParams, l_global: f64) -> Result<Vec<f64>, AnalysisError> {
    if !(l_global > 0.0) || !l_global.is_finite() {
        return Err(AnalysisError::BadConstant { name: "global smoothness", value: l_global });
    }
    let m2 = (params.workers() * params.workers()) as f64;
    let base = params.alpha() * params.alpha() * l_global * l_global * m2;
    Ok(params
        .xi()
        .iter()
        .enumerate()
        .map(|(i, xi)| xi / ((i + 1) as f64 * base))
        .collect())
}

/// delta_c = sum_d (1/d - 1/(d+1)) h(gamma_d); the predicted fraction of
/// uploads that lazy aggregation removes relative to full gradient descent.
pub fn heterogeneity_score(profile: &HeterogeneityProfile, gammas: &[f64]) -> f64 {
    gammas
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let d = (i + 1) as f64;
            (1.0 / d - 1.0 / (d + 1.0)) * profile.fraction_below(g)
        })
        .sum()
}

/// Iterations for a strongly convex run to reach objective error eps * err_1:
/// kappa / (1 - sqrt(D xi)) * ln(1 / eps).
pub fn iteration_complexity_lag(kappa: f64, depth: usize, xi: f64, eps: f64) -> Result<f64, AnalysisError> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(AnalysisError::KappaInvalid(kappa));
    }
    if depth == 0 {
        return Err(AnalysisError::BadConstant { name: "depth", value: 0.0 });
    }
    if !(xi >= 0.0) || !xi.is_finite() {
        return Err(AnalysisError::BadConstant { name: "xi", value: xi });
    }
    let window = depth as f64 * xi;
    if window >= 1.0 {
        return Err(AnalysisError::XiWindowTooLarge(window));
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(AnalysisError::BadConstant { name: "eps", value: eps });
    }
    Ok(kappa / (1.0 - window.sqrt()) * (1.0 / eps).ln())
}

fn check_profile(profile: &HeterogeneityProfile, params: &TriggerParams) -> Result<(), AnalysisError> {
    if profile.workers() != params.workers() {
        return Err(AnalysisError::WorkerMismatch { profile: profile.workers(), params: params.workers() });
    }
    Ok(())
}

/// A-priori upload bound for a strongly convex lazy run:
/// (1 - delta_c) * M * kappa / (1 - sqrt(D xi)) * ln(1 / eps).
pub fn comm_bound_lag(
    profile: &HeterogeneityProfile,
    params: &TriggerParams,
    l_global: f64,
    kappa: f64,
    eps: f64,
) -> Result<f64, AnalysisError> {
    check_profile(profile, params)?;
    let xi = params.xi();
    if xi.windows(2).any(|w| w[0] != w[1]) {
        return Err(AnalysisError::NonUniformXi);
    }
    let iters = iteration_complexity_lag(kappa, params.depth(), xi[0], eps)?;
    let delta_c = heterogeneity_score(profile, &gamma_thresholds(params, l_global)?);
    Ok((1.0 - delta_c) * params.workers() as f64 * iters)
}

/// Upload bound over a measured horizon: (1 - delta_c) * M * iterations.
pub fn comm_bound_with_iterations(
    profile: &HeterogeneityProfile,
    params: &TriggerParams,
    l_global: f64,
    iterations: usize,
) -> Result<f64, AnalysisError> {
    check_profile(profile, params)?;
    let delta_c = heterogeneity_score(profile, &gamma_thresholds(params, l_global)?);
    Ok((1.0 - delta_c) * params.workers() as f64 * iterations as f64)
}

/// Upload bound for smooth nonconvex objectives, measured against the first
/// Lyapunov value: (1 - delta_c) / (1 - sum_d xi_d) * M * 2 L V^1 / eps,
/// where eps targets the running minimum of ||grad||^2.
pub fn comm_bound_nonconvex(
    profile: &HeterogeneityProfile,
    params: &TriggerParams,
    l_global: f64,
    v1: f64,
    eps: f64,
) -> Result<f64, AnalysisError> {
    check_profile(profile, params)?;
    if !(l_global > 0.0) || !l_global.is_finite() {
        return Err(AnalysisError::BadConstant { name: "global smoothness", value: l_global });
    }
    if !(v1 >= 0.0) || !v1.is_finite() {
        return Err(AnalysisError::BadConstant { name: "initial lyapunov value", value: v1 });
    }
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(AnalysisError::BadConstant { name: "eps", value: eps });
    }
    let xi_sum: f64 = params.xi().iter().sum();
    if xi_sum >= 1.0 {
        return Err(AnalysisError::XiSumTooLarge(xi_sum));
    }
    let delta_c = heterogeneity_score(profile, &gamma_thresholds(params, l_global)?);
    let iters = 2.0 * l_global * v1 / ((1.0 - xi_sum) * eps);
    Ok((1.0 - delta_c) * params.workers() as f64 * iters)
}

/// Whether the nonconvex saving precondition holds: some gamma' > 0 with
/// gamma' < h(gamma') / ((D+1) D M^2). Since h only jumps at the points
/// H(m)^2, checking those candidates (plus arbitrarily small gamma' when a
/// worker has zero smoothness) decides it.
pub fn exists_gamma_prime(profile: &HeterogeneityProfile, depth: usize) -> bool {
    if depth == 0 {
        return false;
    }
    let m = profile.workers() as f64;
    let c = ((depth + 1) * depth) as f64 * m * m;
    profile.ratios().iter().any(|r| {
        let s = r * r;
        if s == 0.0 {
            // h is positive on all of (0, eps), so tiny gamma' qualifies
            true
        } else {
            s < profile.fraction_below(s) / c
        }
    })
}

/// Tightest a-priori upload count for one worker over `iterations` rounds:
/// min over lags d with H(m)^2 <= gamma_d of ceil(K / (d+1)) + 1.
/// None when the worker clears no threshold.
pub fn per_worker_upload_bound(
    profile: &HeterogeneityProfile,
    gammas: &[f64],
    worker: usize,
    iterations: usize,
) -> Option<usize> {
    let h2 = profile.ratios()[worker] * profile.ratios()[worker];
    gammas
        .iter()
        .enumerate()
        .filter(|(_, &g)| h2 <= g)
        .map(|(i, _)| {
            let d = i + 1;
            (iterations + d) / (d + 1) + 1
        })
        .min()
}

/// V = objective error + sum_d beta_d ||theta^{k+1-d} - theta^{k-d}||^2,
/// recomputed from an iterate history ordered newest first. Histories shorter
/// than beta.len() + 1 are padded with their oldest entry, matching the
/// zero-filled lag window at the start of a run.
pub fn lyapunov_value(history: &[ModelVector], objective_error: f64, beta: &[f64]) -> Result<f64, AnalysisError> {
    if history.is_empty() {
        return Err(AnalysisError::EmptyHistory);
    }
    let at = |i: usize| &history[i.min(history.len() - 1)];
    let mut movements = Vec::with_capacity(beta.len());
    for d in 1..=beta.len() {
        movements.push(numeric::sq_norm(&at(d - 1).sub(at(d))?));
    }
    let weighted: f64 = beta.iter().zip(movements.iter()).map(|(b, w)| b * w).sum();
    Ok(objective_error + weighted)
}

fn shared_kind(models: &[LossModel]) -> Result<LossKind, AnalysisError> {
    let first = models.first().ok_or(AnalysisError::NoWorkers)?.kind();
    if models.iter().any(|m| m.kind() != first) {
        return Err(AnalysisError::MixedKinds);
    }
    Ok(first)
}

/// Strong convexity modulus of the summed objective, if it has one:
/// twice the smallest eigenvalue of the pooled Gram matrix for square loss,
/// the summed l2 coefficient for logistic. None when the objective is flat
/// somewhere (singular Gram, or logistic without regularization).
pub fn strong_convexity(models: &[LossModel]) -> Result<Option<f64>, AnalysisError> {
    match shared_kind(models)? {
        LossKind::Square => {
            let gram = pooled_gram(models)?;
            let top = numeric::spectral_norm_sym(&gram)?;
            let bottom = numeric::smallest_eigval_sym(&gram)?;
            // eigenvalues this small relative to the top are numerically zero
            if bottom <= 1e-10 * top {
                Ok(None)
            } else {
                Ok(Some(2.0 * bottom))
            }
        }
        LossKind::Logistic => {
            let total: f64 = models.iter().map(|m| m.l2_reg()).sum();
            Ok((total > 0.0).then_some(total))
        }
    }
}

fn pooled_gram(models: &[LossModel]) -> Result<crate::numeric::GramMatrix, AnalysisError> {
    let d = models[0].dim();
    let mut total = crate::numeric::GramMatrix::zeros(d);
    for m in models {
        total.add_assign(&m.data().gram())?;
    }
    Ok(total)
}

/// A solved optimum: the minimizer, its objective value, and the gradient
/// norm certifying it.
#[derive(Debug, Clone)]
pub struct Reference {
    pub theta: ModelVector,
    pub objective: f64,
    pub grad_norm: f64,
}

fn total_gradient(models: &[LossModel], theta: &ModelVector) -> Result<ModelVector, AnalysisError> {
    let mut g = ModelVector::zeros(theta.dim());
    for m in models {
        g.add_assign_vec(&m.loss_grad(theta)?)?;
    }
    Ok(g)
}

fn total_objective(models: &[LossModel], theta: &ModelVector) -> Result<f64, AnalysisError> {
    let mut v = 0.0;
    for m in models {
        v += m.loss_value(theta)?;
    }
    Ok(v)
}

fn to_model_vector(v: &DVector<f64>) -> Result<ModelVector, AnalysisError> {
    Ok(ModelVector::new(v.iter().copied().collect())?)
}

fn svd_solve(g: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, AnalysisError> {
    g.clone()
        .svd(true, true)
        .solve(b, 1e-12)
        .map_err(AnalysisError::LinearSolve)
}

/// Solves the pooled least-squares problem through its normal equations
/// sum(X^T X) theta = sum(X^T y); Cholesky first, pseudo-inverse when the
/// Gram matrix is singular.
fn solve_square(models: &[LossModel]) -> Result<Reference, AnalysisError> {
    let d = models[0].dim();
    let gram = pooled_gram(models)?;
    let g_na = DMatrix::from_fn(d, d, |r, c| gram.entry(r, c));
    let mut b = vec![0.0; d];
    for m in models {
        let data = m.data();
        for i in 0..data.n_samples() {
            let y = data.label(i);
            for (bj, xj) in b.iter_mut().zip(data.row(i)) {
                *bj += y * xj;
            }
        }
    }
    let b_na = DVector::from_vec(b);
    let solved = match g_na.clone().cholesky() {
        Some(ch) => ch.solve(&b_na),
        None => svd_solve(&g_na, &b_na)?,
    };
    let tol = REF_GRAD_TOL * (1.0 + b_na.norm());
    let mut theta = to_model_vector(&solved)?;
    let mut grad_norm = numeric::sq_norm(&total_gradient(models, &theta)?).sqrt();
    if grad_norm > tol {
        // ill-conditioned direct solve; the pseudo-inverse is more forgiving
        let retry = to_model_vector(&svd_solve(&g_na, &b_na)?)?;
        let retry_norm = numeric::sq_norm(&total_gradient(models, &retry)?).sqrt();
        if retry_norm < grad_norm {
            theta = retry;
            grad_norm = retry_norm;
        }
        if grad_norm > tol {
            return Err(AnalysisError::NoConvergence { iters: 0, grad_norm });
        }
    }
    let objective = total_objective(models, &theta)?;
    Ok(Reference { theta, objective, grad_norm })
}

fn logistic_hessian(models: &[LossModel], theta: &ModelVector) -> DMatrix<f64> {
    let d = theta.dim();
    let mut h = DMatrix::zeros(d, d);
    for m in models {
        let data = m.data();
        for i in 0..data.n_samples() {
            let row = data.row(i);
            let margin = data.label(i) * data.row_dot(i, theta);
            let s = losses::sigmoid(-margin);
            let w = s * (1.0 - s);
            for a in 0..d {
                let wa = w * row[a];
                if wa == 0.0 {
                    continue;
                }
                for bcol in 0..d {
                    h[(a, bcol)] += wa * row[bcol];
                }
            }
        }
        for a in 0..d {
            h[(a, a)] += m.l2_reg();
        }
    }
    h
}

/// Damped Newton on the pooled logistic objective from the given start.
fn newton_logistic(models: &[LossModel], start: &ModelVector) -> Result<Reference, AnalysisError> {
    let mut theta = start.clone();
    let tol = NEWTON_TOL * (1.0 + total_objective(models, &theta)?.abs());
    let mut grad = total_gradient(models, &theta)?;
    let mut grad_norm = numeric::sq_norm(&grad).sqrt();
    for _ in 0..NEWTON_MAX_ITERS {
        if grad_norm <= tol {
            let objective = total_objective(models, &theta)?;
            return Ok(Reference { theta, objective, grad_norm });
        }
        let h = logistic_hessian(models, &theta);
        let g_na = DVector::from_vec(grad.as_slice().to_vec());
        let step = h
            .cholesky()
            .ok_or(AnalysisError::LinearSolve("hessian not positive definite"))?
            .solve(&g_na);
        // backtrack on the gradient norm so a long first step cannot overshoot
        let mut scale = 1.0;
        loop {
            let trial_step = ModelVector::new(step.iter().map(|s| -scale * s).collect())?;
            let trial = numeric::axpy(1.0, &trial_step, &theta)?;
            let trial_grad = total_gradient(models, &trial)?;
            let trial_norm = numeric::sq_norm(&trial_grad).sqrt();
            if trial_norm < grad_norm || scale < 1e-12 {
                theta = trial;
                grad = trial_grad;
                grad_norm = trial_norm;
                break;
            }
            scale /= 2.0;
        }
    }
    Err(AnalysisError::NoConvergence { iters: NEWTON_MAX_ITERS, grad_norm })
}

fn solve_logistic(models: &[LossModel]) -> Result<Reference, AnalysisError> {
    let total_reg: f64 = models.iter().map(|m| m.l2_reg()).sum();
    if !(total_reg > 0.0) {
        return Err(AnalysisError::NotStronglyConvex);
    }
    let d = models[0].dim();
    let a = newton_logistic(models, &ModelVector::zeros(d))?;
    let other_start = ModelVector::new(vec![0.5; d])?;
    let b = newton_logistic(models, &other_start)?;
    let distance = numeric::sq_norm(&a.theta.sub(&b.theta)?).sqrt();
    let scale = 1.0 + numeric::sq_norm(&a.theta).sqrt();
    if distance > TWO_START_TOL * scale {
        return Err(AnalysisError::SolverDisagreement { distance });
    }
    Ok(if b.objective < a.objective { b } else { a })
}

/// Solves for the pooled optimum the traces measure their error against.
pub fn solve_reference(models: &[LossModel]) -> Result<Reference, AnalysisError> {
    match shared_kind(models)? {
        LossKind::Square => solve_square(models),
        LossKind::Logistic => solve_logistic(models),
    }
}
