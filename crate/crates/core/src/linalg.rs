//! Small dense linear-algebra helpers shared by the model and the tests.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Ordinary least squares fit of `y` on a full-column-rank design.
#[derive(Clone, Debug)]
pub struct Ols {
    pub beta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rss: f64,
}

impl Ols {
    /// `RSS / (n - q)`.
    pub fn residual_variance(&self, q: usize) -> f64 {
        self.rss / (self.residuals.len() - q) as f64
    }
}

/// Errors with [`Error::RankDeficient`] when a column of `x` is (numerically)
/// a combination of the others.
pub fn check_design(x: &DMatrix<f64>, n: usize) -> Result<()> {
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!("design has {} rows, expected {n}", x.nrows())));
    }
    if x.ncols() == 0 || x.ncols() >= n {
        return Err(Error::DimensionMismatch(format!("need 0 < q < n, got q = {} and n = {n}", x.ncols())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }
    let r = x.clone().qr().r();
    let diag: Vec<f64> = (0..x.ncols()).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 || diag.iter().any(|d| *d <= 1e-10 * largest) {
        return Err(Error::RankDeficient);
    }
    Ok(())
}

pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<Ols> {
    check_design(x, y.len())?;
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient)?;
    let residuals = y - x * &beta;
    let rss = residuals.norm_squared();
    Ok(Ols { beta, residuals, rss })
}

/// The residual-maker `I - X (X'X)^{-1} X'`.
pub fn residual_projection(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_design(x, x.nrows())?;
    let q = x.clone().qr().q();
    let n = x.nrows();
    Ok(DMatrix::identity(n, n) - &q * q.transpose())
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let n = a.nrows();
    let m = a.ncols();
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..m {
            total += a[(i, k)] * b[(k, i)];
        }
    }
    total
}

/// `tr(A B)` for symmetric `B`: the Frobenius inner product.
pub fn trace_with_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for symmetric positive semidefinite `A` through its
/// eigen-decomposition, dropping directions with negligible eigenvalues.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = top * 1e-12;
    let coords = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_fn(coords.len(), |i, _| {
        let l = eig.eigenvalues[i];
        if l > cutoff {
            coords[i] / l
        } else {
            0.0
        }
    });
    &eig.eigenvectors * scaled
}
