use super::Tensor;
use crate::error::{shape_err, Result};
use nalgebra::DMatrix;

/// Singular values of a tensor viewed as a matrix whose last axis is the
/// column axis, in descending order.
pub fn singular_values(t: &Tensor) -> Result<Vec<f64>> {
    let cols = *t
        .shape()
        .last()
        .ok_or_else(|| shape_err("singular values of a scalar"))?;
    let rows = t.numel() / cols;
    let m = DMatrix::from_row_slice(rows, cols, t.data());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Count of singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(t: &Tensor, rel_tol: f64) -> Result<usize> {
    let sv = singular_values(t)?;
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}
