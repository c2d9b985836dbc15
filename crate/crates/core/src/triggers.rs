//! Upload triggers for the lazily aggregated methods.
//!
//! Both variants skip worker m's upload at iteration k when a cheap proxy for
//! its gradient change falls below a weighted sum of recent iterate movement:
//!
//! ```text
//! lhs(m)  <=  (1 / (alpha^2 M^2)) * sum_{d=1..D} xi_d * ||theta^{k+1-d} - theta^{k-d}||^2
//! ```
//!
//! * worker-side (`wk_should_skip`): lhs is the true squared gradient change
//!   `||grad_m(cached) - grad_m(current)||^2`, measured by the worker itself;
//! * server-side (`ps_should_skip`): lhs is the bound `L_m^2 ||theta_cached -
//!   theta^k||^2`, so the server never needs the fresh gradient. The bound
//!   dominates the true change, which makes the server variant strictly more
//!   conservative: whenever it skips, the worker variant would too.
//!
//! Ties skip: equality means the stale gradient is still worth its one upload
//! of savings, and it keeps `xi = 0` exactly equivalent to gradient descent.

use std::collections::VecDeque;
use thiserror::Error;

use crate::numeric::{self, ModelVector, NumericsError};

#[derive(Debug, Error, PartialEq)]
pub enum TriggerError {
    #[error("trigger depth D must be at least 1")]
    DepthZero,
    #[error("xi has {got} entries, expected depth {expected}")]
    XiLength { expected: usize, got: usize },
    #[error("xi_{index} = {value} is negative or non-finite")]
    XiInvalid { index: usize, value: f64 },
    #[error("xi must be non-increasing in d: xi_{index} > xi_{prev}", prev = index - 1)]
    XiNotMonotone { index: usize },
    #[error("stepsize alpha must be positive and finite, got {0}")]
    AlphaInvalid(f64),
    #[error("worker count M must be at least 1")]
    WorkersZero,
    #[error("schedule requires 0 < xi < 1/D, got xi = {xi} with D = {depth}")]
    XiOutOfRange { xi: f64, depth: usize },
    #[error("schedule requires sum_d xi_d < 1, got {sum}")]
    XiSumTooLarge { sum: f64 },
    #[error("smoothness constant must be positive and finite, got {0}")]
    SmoothnessInvalid(f64),
    #[error("window has depth {window}, trigger params expect {params}")]
    WindowDepth { window: usize, params: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Trigger configuration: lag depth D, weights xi_1 >= ... >= xi_D >= 0,
/// stepsize alpha and worker count M.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerParams {
    depth: usize,
    xi: Vec<f64>,
    alpha: f64,
    workers: usize,
}

impl TriggerParams {
    pub fn new(xi: Vec<f64>, alpha: f64, workers: usize) -> Result<Self, TriggerError> {
        let depth = xi.len();
        if depth == 0 {
            return Err(TriggerError::DepthZero);
        }
        for (index, &value) in xi.iter().enumerate() {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(TriggerError::XiInvalid { index, value });
            }
            if index > 0 && value > xi[index - 1] {
                return Err(TriggerError::XiNotMonotone { index });
            }
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(TriggerError::AlphaInvalid(alpha));
        }
        if workers == 0 {
            return Err(TriggerError::WorkersZero);
        }
        Ok(Self { depth, xi, alpha, workers })
    }

    /// Uniform weights `xi_d = xi` for `d = 1..=depth`.
    pub fn uniform(xi: f64, depth: usize, alpha: f64, workers: usize) -> Result<Self, TriggerError> {
        if depth == 0 {
            return Err(TriggerError::DepthZero);
        }
        Self::new(vec![xi; depth], alpha, workers)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

/// Ring buffer of the D most recent squared iterate differences,
/// `w_d = ||theta^{k+1-d} - theta^{k-d}||^2`, newest first. Slots for
/// iterations before the first update hold zero, matching the convention
/// that all pre-initial iterates equal theta^1.
#[derive(Debug, Clone, PartialEq)]
pub struct LagWindow {
    slots: VecDeque<f64>,
}

impl LagWindow {
    pub fn new(depth: usize) -> Result<Self, TriggerError> {
        if depth == 0 {
            return Err(TriggerError::DepthZero);
        }
        Ok(Self { slots: VecDeque::from(vec![0.0; depth]) })
    }

    pub fn depth(&self) -> usize {
        self.slots.len()
    }

    /// Records the newest squared difference and evicts the oldest.
    pub fn push(&mut self, sq_diff: f64) {
        self.slots.pop_back();
        self.slots.push_front(sq_diff);
    }

    /// Newest-first: the d-th yielded value is w_d.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.slots.iter().copied()
    }

    /// w_1, the most recent squared difference.
    pub fn newest(&self) -> f64 {
        self.slots[0]
    }
}

/// Right-hand side shared by both triggers:
/// `(1 / (alpha^2 M^2)) * sum_d xi_d * w_d`.
pub fn rhs_threshold(window: &LagWindow, params: &TriggerParams) -> Result<f64, TriggerError> {
    if window.depth() != params.depth() {
        return Err(TriggerError::WindowDepth { window: window.depth(), params: params.depth() });
    }
    let weighted: f64 = params.xi.iter().zip(window.iter()).map(|(xi, w)| xi * w).sum();
    let m = params.workers as f64;
    Ok(weighted / (params.alpha * params.alpha * m * m))
}

/// Worker-side trigger: skip the upload when the measured gradient change
/// `||grad_cached - grad_fresh||^2` is within the threshold. Ties skip.
pub fn wk_should_skip(
    grad_cached: &ModelVector,
    grad_fresh: &ModelVector,
    window: &LagWindow,
    params: &TriggerParams,
) -> Result<bool, TriggerError> {
    let diff = grad_cached.sub(grad_fresh)?;
    Ok(numeric::sq_norm(&diff) <= rhs_threshold(window, params)?)
}

/// Server-side trigger: skip when the smoothness bound on worker m's gradient
/// change, `L_m^2 ||theta_cached - theta_now||^2`, is within the threshold.
pub fn ps_should_skip(
    theta_cached: &ModelVector,
    theta_now: &ModelVector,
    lipschitz_m: f64,
    window: &LagWindow,
    params: &TriggerParams,
) -> Result<bool, TriggerError> {
    if !(lipschitz_m >= 0.0) || !lipschitz_m.is_finite() {
        return Err(TriggerError::SmoothnessInvalid(lipschitz_m));
    }
    let diff = theta_cached.sub(theta_now)?;
    Ok(lipschitz_m * lipschitz_m * numeric::sq_norm(&diff) <= rhs_threshold(window, params)?)
}

/// Stepsize, trigger weights, and Lyapunov weights for the convergence
/// schedule: uniform `xi < 1/D`, `alpha = (1 - sqrt(D xi)) / L`, and
/// `beta_d = (D - d + 1) xi / (2 alpha eta)` with `eta = sqrt(D xi)`.
/// Under these choices both lazy variants contract the Lyapunov function.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub alpha: f64,
    pub xi: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn schedule_theorem1(xi: f64, depth: usize, l_global: f64) -> Result<Schedule, TriggerError> {
    if depth == 0 {
        return Err(TriggerError::DepthZero);
    }
    if !(l_global > 0.0) || !l_global.is_finite() {
        return Err(TriggerError::SmoothnessInvalid(l_global));
    }
    let d = depth as f64;
    if !(xi > 0.0) || !(xi < 1.0 / d) {
        return Err(TriggerError::XiOutOfRange { xi, depth });
    }
    let eta = (d * xi).sqrt();
    let alpha = (1.0 - eta) / l_global;
    let beta = (1..=depth)
        .map(|dd| (d - dd as f64 + 1.0) * xi / (2.0 * alpha * eta))
        .collect();
    Ok(Schedule { alpha, xi: vec![xi; depth], beta })
}

/// Stepsize for smooth non-convex objectives: `alpha = (1 - sum_d xi_d) / L`,
/// requiring `sum_d xi_d < 1`.
pub fn schedule_nonconvex(xi: &[f64], l_global: f64) -> Result<f64, TriggerError> {
    if xi.is_empty() {
        return Err(TriggerError::DepthZero);
    }
    for (index, &value) in xi.iter().enumerate() {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(TriggerError::XiInvalid { index, value });
        }
    }
    if !(l_global > 0.0) || !l_global.is_finite() {
        return Err(TriggerError::SmoothnessInvalid(l_global));
    }
    let sum: f64 = xi.iter().sum();
    if sum >= 1.0 {
        return Err(TriggerError::XiSumTooLarge { sum });
    }
    Ok((1.0 - sum) / l_global)
}
