//! Dense symmetric linear algebra used by the estimators.
//!
//! Matrices are small (at most a few hundred rows) so everything is dense.
//! SPD systems go through a lower Cholesky factor with an explicit pivot
//! threshold; rank-deficient normal equations go through an SVD based
//! Moore–Penrose inverse.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Absolute symmetry tolerance accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

const PIVOT_REL_TOL: f64 = 1e-14;
const RANK_REL_TOL: f64 = 1e-12;

/// Dense symmetric matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<T>>", into = "Vec<Vec<T>>")]
#[serde(bound(serialize = "T: Real", deserialize = "T: Real"))]
pub struct SymMatrix<T: Real>(DMatrix<T>);

impl<T: Real> SymMatrix<T> {
    /// Wraps `m` after checking it is square, non-empty and symmetric.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::DimensionMismatch("symmetric matrix must have dim >= 1".into()));
        }
        let scale = m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
        let tol = T::lit(SYMMETRY_TOL).max(T::lit(16.0) * T::eps() * scale);
        for i in 0..m.nrows() {
            for j in 0..i {
                let gap = (m[(i, j)] - m[(j, i)]).abs();
                if !(gap <= tol) {
                    return Err(Error::NotSymmetric { row: i, col: j, gap: gap.as_f64() });
                }
            }
        }
        Ok(Self(m))
    }

    /// Builds `(m + mᵀ) / 2`.
    pub fn symmetrized(m: &DMatrix<T>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "cannot symmetrize a {}x{} matrix",
                m.nrows(),
                m.ncols()
            )));
        }
        let half = T::lit(0.5);
        Ok(Self((m + m.transpose()) * half))
    }

    pub fn identity(dim: usize) -> Self {
        assert!(dim >= 1, "dim must be positive");
        Self(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "dim must be positive");
        Self(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        assert!(!diag.is_empty(), "dim must be positive");
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.0
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &DVector<T>) -> T {
        x.dot(&(&self.0 * x))
    }

    pub fn trace(&self) -> T {
        self.0.trace()
    }

    /// Eigenvalues in ascending order with matching eigenvector columns.
    pub fn eigen(&self) -> (DVector<T>, DMatrix<T>) {
        let eig = SymmetricEigen::new(self.0.clone());
        let n = self.dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[a]
                .partial_cmp(&eig.eigenvalues[b])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        (values, vectors)
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eigen().0[0]
    }
}

impl<T: Real> From<SymMatrix<T>> for Vec<Vec<T>> {
    fn from(m: SymMatrix<T>) -> Self {
        m.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl<T: Real> TryFrom<Vec<Vec<T>>> for SymMatrix<T> {
    type Error = Error;

    fn try_from(rows: Vec<Vec<T>>) -> Result<Self> {
        SymMatrix::new(matrix_from_rows(&rows)?)
    }
}

/// Row-major nested vectors to a dense matrix.
pub fn matrix_from_rows<T: Real>(rows: &[Vec<T>]) -> Result<DMatrix<T>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!(
            "row {i} has {} entries, expected {ncols}",
            r.len()
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows<T: Real>(m: &DMatrix<T>) -> Vec<Vec<T>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Lower Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T: Real> {
    l: DMatrix<T>,
}

impl<T: Real> Cholesky<T> {
    /// Fails with `NotPositiveDefinite` when a pivot is at or below
    /// `dim * 1e-14 * max|diag|`.
    pub fn factor(a: &SymMatrix<T>) -> Result<Self> {
        Self::factor_matrix(a.as_matrix())
    }

    /// Same as [`Cholesky::factor`] but reads only the lower triangle of `a`.
    pub fn factor_matrix(a: &DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let max_diag = (0..n).fold(T::zero(), |acc, i| acc.max(a[(i, i)].abs()));
        let threshold = T::from_usize(n).unwrap() * T::lit(PIVOT_REL_TOL) * max_diag;
        let mut l = DMatrix::<T>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > threshold) {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d.as_f64() });
            }
            let ljj = d.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Replaces `B` with `L⁻¹ B`.
    pub fn forward_solve_in_place(&self, b: &mut DMatrix<T>) {
        let n = self.dim();
        debug_assert_eq!(b.nrows(), n);
        let l = &self.l;
        for c in 0..b.ncols() {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / l[(i, i)];
            }
        }
    }

    /// Solves `A X = B` in place by forward then backward substitution.
    pub fn solve_in_place(&self, b: &mut DMatrix<T>) {
        let n = self.dim();
        self.forward_solve_in_place(b);
        let l = &self.l;
        for c in 0..b.ncols() {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in (i + 1)..n {
                    s -= l[(k, i)] * b[(k, c)];
                }
                b[(i, c)] = s / l[(i, i)];
            }
        }
    }

    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        let mut x = b.clone();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        let mut x = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_in_place(&mut x);
        DVector::from_column_slice(x.as_slice())
    }

    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.dim()).fold(T::zero(), |acc, i| acc + two * self.l[(i, i)].ln())
    }
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve<T: Real>(a: &SymMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    if b.nrows() != a.dim() {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side has {} rows, matrix is {}x{}",
            b.nrows(),
            a.dim(),
            a.dim()
        )));
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

/// Moore–Penrose inverse through the SVD.
///
/// Singular values at or below `max(rows, cols) * σ_max * 1e-12` are treated
/// as zero (the relative factor never drops below machine epsilon).
pub fn generalized_inverse<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    generalized_inverse_with_rank(a).0
}

/// [`generalized_inverse`] together with the numerical rank it used.
pub fn generalized_inverse_with_rank<T: Real>(a: &DMatrix<T>) -> (DMatrix<T>, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(n, m), 0);
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let s = &svd.singular_values;
    let s_max = s.iter().fold(T::zero(), |acc, &v| acc.max(v));
    let rel = T::lit(RANK_REL_TOL).max(T::eps());
    let cutoff = T::from_usize(m.max(n)).unwrap() * s_max * rel;

    let mut g = DMatrix::<T>::zeros(n, m);
    let mut rank = 0;
    for (k, &sk) in s.iter().enumerate() {
        if sk > cutoff {
            rank += 1;
            let inv = T::one() / sk;
            // g += v_k * u_kᵀ / s_k
            for j in 0..m {
                let uj = u[(j, k)] * inv;
                for i in 0..n {
                    g[(i, j)] += v_t[(k, i)] * uj;
                }
            }
        }
    }
    (g, rank)
}

/// `log det a` from the Cholesky factor.
pub fn log_det_spd<T: Real>(a: &SymMatrix<T>) -> Result<T> {
    Ok(Cholesky::factor(a)?.log_det())
}

/// True iff the smallest eigenvalue is at least `-tol * max(1, ‖a‖₂)`.
pub fn is_psd<T: Real>(a: &SymMatrix<T>, tol: T) -> bool {
    let (values, _) = a.eigen();
    let min = values[0];
    let norm = values.iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    min >= -tol * norm.max(T::one())
}

/// Symmetric square root `R` with `R Rᵀ = a` for PSD `a`.
///
/// Uses the Cholesky factor when it exists and the eigendecomposition
/// (negative eigenvalues clipped to zero) otherwise.
pub fn psd_sqrt<T: Real>(a: &SymMatrix<T>) -> DMatrix<T> {
    if let Ok(ch) = Cholesky::factor(a) {
        return ch.l;
    }
    let (values, vectors) = a.eigen();
    let mut r = vectors;
    for (j, &lambda) in values.iter().enumerate() {
        let scale = lambda.max(T::zero()).sqrt();
        r.column_mut(j).scale_mut(scale);
    }
    r
}
