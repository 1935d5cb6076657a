//! Small dense linear algebra.
//!
//! The worlds here are tiny (dimensions ≤ 32), so a hand-rolled row-major
//! matrix with a Cholesky solve covers every need: forward passes, normal
//! equations for affine map fits, and the linear probes used in discovery.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite (pivot {pivot} at row {row}); add ridge regularization")]
    NotPositiveDefinite { row: usize, pivot: f64 },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<R> {
    pub rows: usize,
    pub cols: usize,
    /// Row-major storage, `data[r * cols + c]`.
    pub data: Vec<R>,
}

impl<R: Real> Matrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![R::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = R::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn row(&self, r: usize) -> &[R] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[R]) -> Vec<R> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = Aᵀ x`.
    pub fn matvec_t(&self, x: &[R]) -> Vec<R> {
        assert_eq!(x.len(), self.rows, "matvec_t dimension mismatch");
        let mut y = vec![R::zero(); self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            for (c, yc) in y.iter_mut().enumerate() {
                *yc = *yc + self[(r, c)] * xr;
            }
        }
        y
    }
}

impl<R: Real> std::ops::Index<(usize, usize)> for Matrix<R> {
    type Output = R;
    fn index(&self, (r, c): (usize, usize)) -> &R {
        &self.data[r * self.cols + c]
    }
}

impl<R: Real> std::ops::IndexMut<(usize, usize)> for Matrix<R> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut R {
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(R::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<R: Real>(a: &[R]) -> R {
    dot(a, a).sqrt()
}

pub fn sub<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

/// Cholesky factorization of a symmetric positive-definite matrix.
///
/// Returns the lower-triangular factor L with `A = L Lᵀ`. The smallest
/// diagonal pivot is reported alongside so callers can surface conditioning
/// diagnostics.
pub fn cholesky<R: Real>(a: &Matrix<R>) -> Result<(Matrix<R>, R), LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    let mut min_pivot = R::infinity();
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= R::zero() {
                    return Err(LinalgError::NotPositiveDefinite {
                        row: i,
                        pivot: s.to_f64_lossy(),
                    });
                }
                let p = s.sqrt();
                min_pivot = min_pivot.min(p);
                l[(i, j)] = p;
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Ok((l, min_pivot))
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd<R: Real>(a: &Matrix<R>, b: &[R]) -> Result<Vec<R>, LinalgError> {
    let (l, _) = cholesky(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Forward/back substitution given the lower Cholesky factor.
pub fn cholesky_solve<R: Real>(l: &Matrix<R>, b: &[R]) -> Vec<R> {
    let n = l.rows;
    let mut y = vec![R::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![R::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s = s - l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}
