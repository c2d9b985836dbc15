//! Per-worker objectives: square loss and l2-regularized logistic loss.
//!
//! Each worker m holds `L_m(theta)`; the server-side objective is the plain
//! sum over workers. Smoothness constants are certified from the shard's
//! Gram matrix:
//!
//! * square: `L_m = 2 * lambda_max(X^T X)` (Hessian is `2 X^T X`)
//! * logistic: `L_m = lambda_max(X^T X) / 4 + lambda` (sigmoid' <= 1/4)
//!
//! The global constant for the summed objective defaults to the spectral
//! norm of the summed Gram, which is tighter than `sum_m L_m` and is what
//! the `1/L` stepsizes are derived from.

use crate::numeric::{self, DataMatrix, GramMatrix, ModelVector, NumericsError};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("logistic label at row {row} is {value}, expected -1 or +1")]
    BadLabel { row: usize, value: f64 },
    #[error("l2 regularization must be non-negative, got {0}")]
    NegativeReg(f64),
    #[error("square loss does not take an l2 term (got {0})")]
    RegOnSquare(f64),
    #[error("cannot certify an empty worker set")]
    EmptyWorkerSet,
    #[error("workers mix square and logistic losses")]
    MixedKinds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Square,
    Logistic,
}

/// One worker's local objective over its data shard.
#[derive(Debug, Clone)]
pub struct LossModel {
    kind: LossKind,
    data: DataMatrix,
    l2_reg: f64,
}

impl LossModel {
    pub fn new(kind: LossKind, data: DataMatrix, l2_reg: f64) -> Result<Self, LossError> {
        if l2_reg < 0.0 || !l2_reg.is_finite() {
            return Err(LossError::NegativeReg(l2_reg));
        }
        match kind {
            LossKind::Square => {
                if l2_reg != 0.0 {
                    return Err(LossError::RegOnSquare(l2_reg));
                }
            }
            LossKind::Logistic => {
                for i in 0..data.n_samples() {
                    let y = data.label(i);
                    if y != 1.0 && y != -1.0 {
                        return Err(LossError::BadLabel { row: i, value: y });
                    }
                }
            }
        }
        Ok(Self { kind, data, l2_reg })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn data(&self) -> &DataMatrix {
        &self.data
    }

    pub fn l2_reg(&self) -> f64 {
        self.l2_reg
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    /// L_m(theta). Square: sum_n (y_n - x_n.theta)^2. Logistic:
    /// sum_n ln(1 + exp(-y_n x_n.theta)) + (l2/2)||theta||^2.
    pub fn loss_value(&self, theta: &ModelVector) -> Result<f64, LossError> {
        self.check_dim(theta)?;
        let n = self.data.n_samples();
        let mut total = 0.0;
        match self.kind {
            LossKind::Square => {
                for i in 0..n {
                    let r = self.data.label(i) - self.data.row_dot(i, theta);
                    total += r * r;
                }
            }
            LossKind::Logistic => {
                for i in 0..n {
                    let margin = self.data.label(i) * self.data.row_dot(i, theta);
                    total += softplus(-margin);
                }
                total += 0.5 * self.l2_reg * numeric::sq_norm(theta);
            }
        }
        Ok(total)
    }

    /// Gradient of L_m at theta.
    pub fn loss_grad(&self, theta: &ModelVector) -> Result<ModelVector, LossError> {
        self.check_dim(theta)?;
        let n = self.data.n_samples();
        let d = self.data.dim();
        let mut g = vec![0.0; d];
        match self.kind {
            LossKind::Square => {
                for i in 0..n {
                    // d/dtheta (y - x.theta)^2 = -2 (y - x.theta) x
                    let coeff = -2.0 * (self.data.label(i) - self.data.row_dot(i, theta));
                    accumulate(&mut g, coeff, self.data.row(i));
                }
            }
            LossKind::Logistic => {
                for i in 0..n {
                    let y = self.data.label(i);
                    let coeff = -y * sigmoid(-y * self.data.row_dot(i, theta));
                    accumulate(&mut g, coeff, self.data.row(i));
                }
                for (gj, tj) in g.iter_mut().zip(theta.as_slice()) {
                    *gj += self.l2_reg * tj;
                }
            }
        }
        Ok(ModelVector::new(g)?)
    }

    /// Certified Lipschitz constant of the gradient.
    pub fn smoothness_constant(&self) -> Result<f64, LossError> {
        let top = numeric::spectral_norm_sym(&self.data.gram())?;
        Ok(match self.kind {
            LossKind::Square => 2.0 * top,
            LossKind::Logistic => 0.25 * top + self.l2_reg,
        })
    }

    fn check_dim(&self, theta: &ModelVector) -> Result<(), LossError> {
        if theta.dim() != self.data.dim() {
            return Err(LossError::Numerics(NumericsError::DimensionMismatch {
                left: theta.dim(),
                right: self.data.dim(),
            }));
        }
        Ok(())
    }
}

fn accumulate(g: &mut [f64], coeff: f64, row: &[f64]) {
    for (gj, xj) in g.iter_mut().zip(row) {
        *gj += coeff * xj;
    }
}

/// ln(1 + e^x) without overflow for large |x|.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// 1 / (1 + e^-z) evaluated on the side that avoids overflow.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// How the smoothness constant of the summed objective is certified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GlobalSmoothness {
    /// Spectral norm of the summed Gram matrix (tighter, default).
    #[default]
    SummedGram,
    /// `sum_m L_m`, always valid but looser.
    SumOfWorkers,
}

/// Per-worker and global smoothness constants for one worker set.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothnessCert {
    per_worker: Vec<f64>,
    global: f64,
    mode: GlobalSmoothness,
}

impl SmoothnessCert {
    /// Certifies every worker plus the summed objective. All workers must
    /// share one loss kind; the `SummedGram` mode adds the per-worker l2
    /// terms on top of the summed-Gram bound.
    pub fn certify(models: &[LossModel], mode: GlobalSmoothness) -> Result<Self, LossError> {
        let first = models.first().ok_or(LossError::EmptyWorkerSet)?;
        if models.iter().any(|m| m.kind() != first.kind()) {
            return Err(LossError::MixedKinds);
        }
        let per_worker = models
            .iter()
            .map(|m| m.smoothness_constant())
            .collect::<Result<Vec<_>, _>>()?;
        let global = match mode {
            GlobalSmoothness::SumOfWorkers => per_worker.iter().sum(),
            GlobalSmoothness::SummedGram => {
                let mut gram = GramMatrix::zeros(first.dim());
                for m in models {
                    gram.add_assign(&m.data().gram())?;
                }
                let top = numeric::spectral_norm_sym(&gram)?;
                match first.kind() {
                    LossKind::Square => 2.0 * top,
                    LossKind::Logistic => {
                        0.25 * top + models.iter().map(LossModel::l2_reg).sum::<f64>()
                    }
                }
            }
        };
        Ok(Self { per_worker, global, mode })
    }

    pub fn per_worker(&self) -> &[f64] {
        &self.per_worker
    }

    pub fn worker(&self, index: usize) -> f64 {
        self.per_worker[index]
    }

    pub fn global(&self) -> f64 {
        self.global
    }

    pub fn mode(&self) -> GlobalSmoothness {
        self.mode
    }

    pub fn workers(&self) -> usize {
        self.per_worker.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::new(v.to_vec()).unwrap()
    }

    fn square_model(n: usize, d: usize, rows: &[f64], labels: &[f64]) -> LossModel {
        let data = DataMatrix::new(n, d, rows.to_vec(), labels.to_vec()).unwrap();
        LossModel::new(LossKind::Square, data, 0.0).unwrap()
    }

    fn logistic_model(n: usize, d: usize, rows: &[f64], labels: &[f64], l2: f64) -> LossModel {
        let data = DataMatrix::new(n, d, rows.to_vec(), labels.to_vec()).unwrap();
        LossModel::new(LossKind::Logistic, data, l2).unwrap()
    }

    fn random_square(rng: &mut StdRng, n: usize, d: usize) -> LossModel {
        let rows: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        square_model(n, d, &rows, &labels)
    }

    fn random_logistic(rng: &mut StdRng, n: usize, d: usize) -> LossModel {
        let rows: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<f64> = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        logistic_model(n, d, &rows, &labels, 1e-3)
    }

    fn random_theta(rng: &mut StdRng, d: usize) -> ModelVector {
        mv(&(0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    /// Central finite difference of loss_value, the independent oracle for
    /// loss_grad.
    fn fd_grad(model: &LossModel, theta: &ModelVector, h: f64) -> Vec<f64> {
        let d = theta.dim();
        (0..d)
            .map(|j| {
                let mut up = theta.as_slice().to_vec();
                let mut dn = up.clone();
                up[j] += h;
                dn[j] -= h;
                let fu = model.loss_value(&mv(&up)).unwrap();
                let fd = model.loss_value(&mv(&dn)).unwrap();
                (fu - fd) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_grad_err(model: &LossModel, theta: &ModelVector) -> f64 {
        let g = model.loss_grad(theta).unwrap();
        let fd = fd_grad(model, theta, 1e-6);
        let scale = g
            .as_slice()
            .iter()
            .fold(1.0_f64, |acc, v| acc.max(v.abs()));
        fd.iter()
            .zip(g.as_slice())
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn square_loss_is_zero_on_exact_fit() {
        // rows are the identity, labels equal theta
        let m = square_model(2, 2, &[1.0, 0.0, 0.0, 1.0], &[2.0, 3.0]);
        let theta = mv(&[2.0, 3.0]);
        assert_eq!(m.loss_value(&theta).unwrap(), 0.0);
        assert_eq!(m.loss_grad(&theta).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn square_loss_single_sample_hand_value() {
        // (0 - 1*2)^2 = 4, gradient -2(0-2)*1 = 4
        let m = square_model(1, 1, &[1.0], &[0.0]);
        let theta = mv(&[2.0]);
        assert_eq!(m.loss_value(&theta).unwrap(), 4.0);
        assert_eq!(m.loss_grad(&theta).unwrap().as_slice(), &[4.0]);
    }

    #[test]
    fn logistic_loss_at_origin_is_n_ln2() {
        let m = logistic_model(4, 2, &[1.0, 0.5, -0.3, 1.0, 0.7, -0.2, 0.1, 0.9], &[1.0, -1.0, 1.0, -1.0], 1e-3);
        let v = m.loss_value(&ModelVector::zeros(2)).unwrap();
        assert!((v - 4.0 * std::f64::consts::LN_2).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn logistic_grad_vanishes_on_mirrored_data_at_origin() {
        // (x, +1) and (-x, +1): the y*x terms cancel at theta = 0
        let m = logistic_model(2, 2, &[0.4, -0.7, -0.4, 0.7], &[1.0, 1.0], 1e-3);
        let g = m.loss_grad(&ModelVector::zeros(2)).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn logistic_is_stable_at_huge_margins() {
        let m = logistic_model(2, 1, &[1.0, 1.0], &[1.0, -1.0], 0.0);
        for t in [-500.0, 500.0] {
            let theta = mv(&[t]);
            let v = m.loss_value(&theta).unwrap();
            let g = m.loss_grad(&theta).unwrap();
            assert!(v.is_finite() && v >= 500.0, "one margin is -500: loss ~ 500, got {v}");
            assert!(g.is_finite());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..20 {
            let d = rng.random_range(2..8);
            let n = rng.random_range(1..12);
            let sq = random_square(&mut rng, n, d);
            let lg = random_logistic(&mut rng, n, d);
            let theta = random_theta(&mut rng, d);
            assert!(max_rel_grad_err(&sq, &theta) < 1e-5, "square grad disagrees with FD");
            assert!(max_rel_grad_err(&lg, &theta) < 1e-5, "logistic grad disagrees with FD");
        }
    }

    #[test]
    fn smoothness_constants_on_identity_shards() {
        // identity rows: Gram = I, so square gives 2, logistic 1/4 + l2
        let m = square_model(3, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[0.0; 3]);
        assert!((m.smoothness_constant().unwrap() - 2.0).abs() < 1e-10);
        let m = logistic_model(2, 2, &[1.0, 0.0, 0.0, 1.0], &[1.0, -1.0], 1e-3);
        assert!((m.smoothness_constant().unwrap() - 0.251).abs() < 1e-10);
    }

    #[test]
    fn smoothness_constant_matches_closed_form_eig() {
        // rows [1,0],[1,1]: lambda_max(X^T X) = (3+sqrt(5))/2, L = 3+sqrt(5)
        let m = square_model(2, 2, &[1.0, 0.0, 1.0, 1.0], &[0.0, 0.0]);
        let expect = 3.0 + 5.0_f64.sqrt();
        assert!((m.smoothness_constant().unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn gradient_lipschitz_bound_holds_on_random_pairs() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..25 {
            let d = rng.random_range(2..6);
            let n = rng.random_range(1..10);
            let model = if trial % 2 == 0 {
                random_square(&mut rng, n, d)
            } else {
                random_logistic(&mut rng, n, d)
            };
            let l = model.smoothness_constant().unwrap();
            for _ in 0..4 {
                let t1 = random_theta(&mut rng, d);
                let t2 = random_theta(&mut rng, d);
                let dg = model.loss_grad(&t1).unwrap().sub(&model.loss_grad(&t2).unwrap()).unwrap();
                let dt = t1.sub(&t2).unwrap();
                let lhs = numeric::sq_norm(&dg).sqrt();
                let rhs = l * numeric::sq_norm(&dt).sqrt();
                assert!(
                    lhs <= rhs * (1.0 + 1e-9),
                    "gradient moved faster than certified: {lhs} > {l} * ||dtheta|| = {rhs}"
                );
            }
        }
    }

    #[test]
    fn losses_are_convex_along_gradients() {
        let mut rng = StdRng::seed_from_u64(11);
        for trial in 0..10 {
            let model = if trial % 2 == 0 {
                random_square(&mut rng, 6, 3)
            } else {
                random_logistic(&mut rng, 6, 3)
            };
            let t1 = random_theta(&mut rng, 3);
            let t2 = random_theta(&mut rng, 3);
            let f1 = model.loss_value(&t1).unwrap();
            let f2 = model.loss_value(&t2).unwrap();
            let g1 = model.loss_grad(&t1).unwrap();
            let lin = f1 + numeric::dot(&g1, &t2.sub(&t1).unwrap()).unwrap();
            assert!(f2 >= lin - 1e-9, "first-order convexity violated: {f2} < {lin}");
        }
    }

    #[test]
    fn empty_shard_contributes_nothing() {
        let data = DataMatrix::new(0, 3, vec![], vec![]).unwrap();
        let m = LossModel::new(LossKind::Square, data, 0.0).unwrap();
        let theta = mv(&[1.0, 2.0, 3.0]);
        assert_eq!(m.loss_value(&theta).unwrap(), 0.0);
        assert_eq!(m.loss_grad(&theta).unwrap(), ModelVector::zeros(3));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let data = DataMatrix::new(1, 1, vec![1.0], vec![0.5]).unwrap();
        assert!(matches!(
            LossModel::new(LossKind::Logistic, data.clone(), 0.0),
            Err(LossError::BadLabel { row: 0, value }) if value == 0.5
        ));
        assert!(matches!(
            LossModel::new(LossKind::Square, data.clone(), 0.1),
            Err(LossError::RegOnSquare(_))
        ));
        let ok = DataMatrix::new(1, 1, vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            LossModel::new(LossKind::Logistic, ok, -1.0),
            Err(LossError::NegativeReg(_))
        ));
        assert!(matches!(
            SmoothnessCert::certify(&[], GlobalSmoothness::SummedGram),
            Err(LossError::EmptyWorkerSet)
        ));
    }

    #[test]
    fn certify_global_is_no_looser_than_worker_sum() {
        let mut rng = StdRng::seed_from_u64(3);
        let models: Vec<LossModel> = (0..4).map(|_| random_square(&mut rng, 8, 4)).collect();
        let tight = SmoothnessCert::certify(&models, GlobalSmoothness::SummedGram).unwrap();
        let loose = SmoothnessCert::certify(&models, GlobalSmoothness::SumOfWorkers).unwrap();
        assert_eq!(loose.global(), loose.per_worker().iter().sum::<f64>());
        assert!(
            tight.global() <= loose.global() * (1.0 + 1e-9),
            "summed-Gram bound {} exceeds worker sum {}",
            tight.global(),
            loose.global()
        );
        assert_eq!(tight.per_worker(), loose.per_worker());
        assert_eq!(tight.workers(), 4);
    }

    #[test]
    fn certify_rejects_mixed_kinds() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = random_square(&mut rng, 4, 3);
        let b = random_logistic(&mut rng, 4, 3);
        assert_eq!(
            SmoothnessCert::certify(&[a, b], GlobalSmoothness::SummedGram),
            Err(LossError::MixedKinds)
        );
    }
}
