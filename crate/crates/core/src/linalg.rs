use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) const RIDGE: f64 = 1e-8;

/// Solves `a x = b` for symmetric positive definite `a`, retrying once with a
/// `RIDGE` added to the diagonal.
pub(crate) fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    let mut damped = a.clone();
    for i in 0..damped.nrows() {
        damped[(i, i)] += RIDGE;
    }
    damped
        .cholesky()
        .map(|chol| chol.solve(b))
        .ok_or_else(|| Error::Singular(format!("{what}: matrix not positive definite after ridge damping")))
}

/// Ordinary least squares through the normal equations, ridge-damped when
/// `x'x` is singular.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = x.tr_mul(x);
    let xty = x.tr_mul(y);
    solve_spd(&xtx, &xty, "least squares")
}

/// Rows `rows` of `m`, in order.
pub(crate) fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Sum by recursive halving; fixed reduction order independent of threading.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
