//! Dense vector/matrix kernels shared by every other module.
//!
//! Models and gradients are flat `f64` vectors; data shards are row-major
//! matrices with one label per row. The only nontrivial kernel is
//! `spectral_norm_sym`, a power iteration on a symmetric PSD Gram matrix.
//! Power iteration keeps this module dependency-free and is accurate to the
//! requested relative tolerance for the well-separated spectra produced by
//! the data generator.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not square: {len} entries cannot form a d x d grid")]
    NotSquare { len: usize },
    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },
    #[error("power iteration did not converge within {iters} iterations (best estimate {best})")]
    NoConvergence { iters: usize, best: f64 },
}

/// Model iterate or gradient: a dense point in R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    entries: Vec<f64>,
}

impl ModelVector {
    /// Rejects NaN/Inf entries so downstream arithmetic starts from clean state.
    pub fn new(entries: Vec<f64>) -> Result<Self, NumericsError> {
        if let Some(index) = entries.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { entries })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { entries: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    /// self - rhs
    pub fn sub(&self, rhs: &Self) -> Result<Self, NumericsError> {
        check_dims(self.dim(), rhs.dim())?;
        Ok(Self {
            entries: self
                .entries
                .iter()
                .zip(&rhs.entries)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    /// self += rhs, in place.
    pub fn add_assign_vec(&mut self, rhs: &Self) -> Result<(), NumericsError> {
        check_dims(self.dim(), rhs.dim())?;
        for (a, b) in self.entries.iter_mut().zip(&rhs.entries) {
            *a += b;
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for ModelVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

fn check_dims(left: usize, right: usize) -> Result<(), NumericsError> {
    if left != right {
        return Err(NumericsError::DimensionMismatch { left, right });
    }
    Ok(())
}

pub fn dot(a: &ModelVector, b: &ModelVector) -> Result<f64, NumericsError> {
    check_dims(a.dim(), b.dim())?;
    Ok(slice_dot(a.as_slice(), b.as_slice()))
}

/// ||a||^2, always >= 0.
pub fn sq_norm(a: &ModelVector) -> f64 {
    slice_dot(a.as_slice(), a.as_slice())
}

/// alpha * x + y, the only update shape the server ever applies.
pub fn axpy(alpha: f64, x: &ModelVector, y: &ModelVector) -> Result<ModelVector, NumericsError> {
    check_dims(x.dim(), y.dim())?;
    Ok(ModelVector {
        entries: x
            .entries
            .iter()
            .zip(&y.entries)
            .map(|(xi, yi)| alpha * xi + yi)
            .collect(),
    })
}

pub(crate) fn slice_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One worker's shard: n feature rows of width d plus one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    n: usize,
    d: usize,
    rows: Vec<f64>, // row-major, n * d
    labels: Vec<f64>,
}

impl DataMatrix {
    pub fn new(n: usize, d: usize, rows: Vec<f64>, labels: Vec<f64>) -> Result<Self, NumericsError> {
        if rows.len() != n * d {
            return Err(NumericsError::DimensionMismatch { left: rows.len(), right: n * d });
        }
        if labels.len() != n {
            return Err(NumericsError::DimensionMismatch { left: labels.len(), right: n });
        }
        if let Some(index) = rows.iter().chain(labels.iter()).position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { index });
        }
        Ok(Self { n, d, rows, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// x_i . theta for row i.
    pub fn row_dot(&self, i: usize, theta: &ModelVector) -> f64 {
        slice_dot(self.row(i), theta.as_slice())
    }

    /// Scales every feature entry in place; labels are left untouched.
    pub fn scale_features(&mut self, s: f64) {
        for v in &mut self.rows {
            *v *= s;
        }
    }

    /// X^T X, the d x d Gram matrix of the shard.
    pub fn gram(&self) -> GramMatrix {
        let d = self.d;
        let mut vals = vec![0.0; d * d];
        for i in 0..self.n {
            let row = self.row(i);
            for a in 0..d {
                let ra = row[a];
                if ra == 0.0 {
                    continue;
                }
                for b in a..d {
                    vals[a * d + b] += ra * row[b];
                }
            }
        }
        // mirror the upper triangle
        for a in 0..d {
            for b in 0..a {
                vals[a * d + b] = vals[b * d + a];
            }
        }
        GramMatrix { d, vals }
    }
}

/// Symmetric PSD matrix, dense row-major. Produced by `DataMatrix::gram` and
/// sums thereof; constructors only check shape, symmetry is the caller's
/// contract.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    d: usize,
    vals: Vec<f64>,
}

impl GramMatrix {
    pub fn from_entries(vals: Vec<f64>) -> Result<Self, NumericsError> {
        let len = vals.len();
        let d = (len as f64).sqrt().round() as usize;
        if d * d != len {
            return Err(NumericsError::NotSquare { len });
        }
        Ok(Self { d, vals })
    }

    pub fn zeros(d: usize) -> Self {
        Self { d, vals: vec![0.0; d * d] }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entry(&self, a: usize, b: usize) -> f64 {
        self.vals[a * self.d + b]
    }

    pub fn add_assign(&mut self, rhs: &Self) -> Result<(), NumericsError> {
        check_dims(self.d, rhs.d)?;
        for (a, b) in self.vals.iter_mut().zip(&rhs.vals) {
            *a += b;
        }
        Ok(())
    }

    fn matvec(&self, v: &[f64], out: &mut [f64]) {
        for a in 0..self.d {
            out[a] = slice_dot(&self.vals[a * self.d..(a + 1) * self.d], v);
        }
    }
}

const POWER_MAX_ITERS: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-10;

fn power_iterate(g: &GramMatrix, mut v: Vec<f64>) -> Result<f64, NumericsError> {
    let mut w = vec![0.0; g.dim()];
    let mut lambda = 0.0_f64;
    for _ in 0..POWER_MAX_ITERS {
        g.matvec(&v, &mut w);
        let next = slice_dot(&v, &w);
        let norm = slice_dot(&w, &w).sqrt();
        if norm == 0.0 {
            // start vector is in the null space; for a PSD matrix and a
            // generic start this only happens for the zero matrix
            return Ok(0.0);
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        if (next - lambda).abs() <= POWER_REL_TOL * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        lambda = next;
    }
    Err(NumericsError::NoConvergence { iters: POWER_MAX_ITERS, best: lambda })
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Starts from the normalized all-ones vector and stops once the Rayleigh
/// quotient is stable to `1e-10` relative. The estimate converges to the top
/// eigenvalue whenever the start vector has a component along the dominant
/// eigenspace, which holds for the Gram matrices of generic data.
pub fn spectral_norm_sym(g: &GramMatrix) -> Result<f64, NumericsError> {
    let d = g.dim();
    if d == 0 {
        return Ok(0.0);
    }
    power_iterate(g, vec![1.0 / (d as f64).sqrt(); d])
}

/// Smallest eigenvalue of a symmetric PSD matrix, via power iteration on the
/// shifted matrix `s*I - G` with `s = lambda_max(G)`.
///
/// The shifted iteration starts from a fixed pseudo-random vector instead of
/// all-ones: differences of eigenvectors (to which the shift gives the top
/// slot) are often exactly orthogonal to the ones vector.
pub fn smallest_eigval_sym(g: &GramMatrix) -> Result<f64, NumericsError> {
    let s = spectral_norm_sym(g)?;
    let d = g.dim();
    if d == 0 {
        return Ok(0.0);
    }
    let mut shifted = GramMatrix::zeros(d);
    for a in 0..d {
        for b in 0..d {
            let v = if a == b { s - g.entry(a, b) } else { -g.entry(a, b) };
            shifted.vals[a * d + b] = v;
        }
    }
    // deterministic LCG start in [0.5, 1.5)
    let mut state = 0x9e37_79b9_7f4a_7c15_u64;
    let start = (0..d)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    let t = power_iterate(&shifted, start)?;
    Ok(s - t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(v: &[f64]) -> ModelVector {
        ModelVector::new(v.to_vec()).expect("finite test vector")
    }

    #[test]
    fn dot_and_norm_match_hand_values() {
        let a = mv(&[1.0, 2.0, 3.0]);
        let b = mv(&[4.0, -5.0, 6.0]);
        assert_eq!(dot(&a, &b).unwrap(), 4.0 - 10.0 + 18.0);
        assert_eq!(sq_norm(&a), 14.0);
        assert_eq!(sq_norm(&ModelVector::zeros(7)), 0.0);
    }

    #[test]
    fn axpy_is_exact_on_integer_grids() {
        let x = mv(&[1.0, -2.0, 4.0]);
        let y = mv(&[10.0, 20.0, 30.0]);
        let z = axpy(2.0, &x, &y).unwrap();
        assert_eq!(z.as_slice(), &[12.0, 16.0, 38.0]);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let a = mv(&[1.0]);
        let b = mv(&[1.0, 2.0]);
        assert_eq!(dot(&a, &b), Err(NumericsError::DimensionMismatch { left: 1, right: 2 }));
        assert!(axpy(1.0, &a, &b).is_err());
        assert!(a.sub(&b).is_err());
    }

    #[test]
    fn non_finite_entries_are_rejected_at_construction() {
        assert_eq!(
            ModelVector::new(vec![0.0, f64::NAN]),
            Err(NumericsError::NonFinite { index: 1 })
        );
        assert!(DataMatrix::new(1, 2, vec![1.0, f64::INFINITY], vec![0.0]).is_err());
    }

    #[test]
    fn gram_of_hand_matrix() {
        // rows [1,0] and [1,1]: X^T X = [[2,1],[1,1]]
        let m = DataMatrix::new(2, 2, vec![1.0, 0.0, 1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let g = m.gram();
        assert_eq!(g.entry(0, 0), 2.0);
        assert_eq!(g.entry(0, 1), 1.0);
        assert_eq!(g.entry(1, 0), 1.0);
        assert_eq!(g.entry(1, 1), 1.0);
    }

    #[test]
    fn spectral_norm_of_diagonal_is_max_entry() {
        let g = GramMatrix::from_entries(vec![
            1.0, 0.0, 0.0, //
            0.0, 2.0, 0.0, //
            0.0, 0.0, 3.0,
        ])
        .unwrap();
        let l = spectral_norm_sym(&g).unwrap();
        assert!((l - 3.0).abs() < 1e-9, "lambda_max(diag(1,2,3)) = 3, got {l}");
    }

    #[test]
    fn spectral_norm_of_identity_is_one() {
        let d = 5;
        let mut g = GramMatrix::zeros(d);
        for a in 0..d {
            g.vals[a * d + a] = 1.0;
        }
        assert!((spectral_norm_sym(&g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_two_by_two_is_closed_form() {
        // eigenvalues of [[2,1],[1,2]] are 1 and 3
        let g = GramMatrix::from_entries(vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((spectral_norm_sym(&g).unwrap() - 3.0).abs() < 1e-9);
        // eigenvalues of [[2,1],[1,1]] are (3 +/- sqrt(5)) / 2
        let g = GramMatrix::from_entries(vec![2.0, 1.0, 1.0, 1.0]).unwrap();
        let expect = (3.0 + 5.0_f64.sqrt()) / 2.0;
        assert!((spectral_norm_sym(&g).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_of_zero_matrix_is_zero() {
        let g = GramMatrix::zeros(4);
        assert_eq!(spectral_norm_sym(&g).unwrap(), 0.0);
    }

    #[test]
    fn smallest_eigval_of_two_by_two_is_closed_form() {
        let g = GramMatrix::from_entries(vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let l = smallest_eigval_sym(&g).unwrap();
        assert!((l - 1.0).abs() < 1e-8, "lambda_min = 1, got {l}");
        let g = GramMatrix::from_entries(vec![2.0, 1.0, 1.0, 1.0]).unwrap();
        let expect = (3.0 - 5.0_f64.sqrt()) / 2.0;
        let l = smallest_eigval_sym(&g).unwrap();
        assert!((l - expect).abs() < 1e-8);
    }

    #[test]
    fn non_square_entry_list_is_rejected() {
        assert_eq!(
            GramMatrix::from_entries(vec![1.0, 2.0, 3.0]),
            Err(NumericsError::NotSquare { len: 3 })
        );
    }
}
