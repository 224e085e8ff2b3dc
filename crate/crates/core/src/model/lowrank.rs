use nalgebra::DMatrix;

use crate::error::{Error, Result};

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if rows * cols != data.len() || rows == 0 || cols == 0 {
        return Err(Error::Contract(format!(
            "{} values do not form a {rows}x{cols} matrix",
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Squared Frobenius error of the best rank-`rank` approximation of a square
/// row-major matrix, measured against the truncated SVD reconstruction.
pub fn low_rank_residual(data: &[f64], n: usize, rank: usize) -> Result<f64> {
    if n * n != data.len() {
        return Err(Error::Contract(format!(
            "low-rank residual needs a square matrix, got {} values for n = {n}",
            data.len()
        )));
    }
    let s = matrix(data, n, n)?;
    let svd = s.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut approx = DMatrix::<f64>::zeros(n, n);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    for &k in order.iter().take(rank) {
        approx += svd.singular_values[k] * u.column(k) * vt.row(k);
    }
    Ok((s - approx).norm_squared())
}

/// Singular values in descending order.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let m = matrix(data, rows, cols)?;
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Numerical rank: singular values above `rel_tol` times the largest.
pub fn numerical_rank(data: &[f64], rows: usize, cols: usize, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(data, rows, cols)?;
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}
