//! Dense symmetric-positive-definite solves via Cholesky factorization.
//!
//! The systems solved here are small (side length = attribute dimension or
//! number of seen classes), so a straightforward O(n^3) factorization is
//! plenty and keeps results bit-reproducible across machines.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor L with A = L L^T.
pub struct CholeskyFactor {
    l: Array2<f64>,
}

/// Factorizes a symmetric positive-definite matrix. Only the lower triangle
/// of `a` is read. Fails with `Error::Singular` when a pivot is not strictly
/// positive (or not finite), i.e. when `a` is singular or indefinite.
pub fn cholesky(a: ArrayView2<f64>) -> Result<CholeskyFactor> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular(format!(
                "non-positive pivot {d:e} at row {j} during Cholesky factorization"
            )));
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
    Ok(CholeskyFactor { l })
}

impl CholeskyFactor {
    pub fn side(&self) -> usize {
        self.l.nrows()
    }

    /// Solves A x = b for one right-hand side.
    pub fn solve_vec(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let n = self.side();
        assert_eq!(b.len(), n, "right-hand side length must match matrix side");
        let mut y = b.to_owned();
        // Forward substitution: L y = b.
        for i in 0..n {
            let mut v = y[i];
            for k in 0..i {
                v -= self.l[(i, k)] * y[k];
            }
            y[i] = v / self.l[(i, i)];
        }
        // Back substitution: L^T x = y.
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in (i + 1)..n {
                v -= self.l[(k, i)] * y[k];
            }
            y[i] = v / self.l[(i, i)];
        }
        y
    }

    /// Solves A X = B column by column. `b` is n x m; the result has the
    /// same shape.
    pub fn solve_mat(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let n = self.side();
        assert_eq!(b.nrows(), n, "right-hand side rows must match matrix side");
        let mut out = Array2::<f64>::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve_vec(col));
        }
        out
    }
}

/// One-shot SPD solve A X = B.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(cholesky(a)?.solve_mat(b))
}
