//! Untracked numerical kernels.
//!
//! Every function here validates shapes and returns fresh tensors; none of
//! them record anything. The tape in [`crate::autodiff`] composes these for
//! the forward pass and uses the raw slice helpers for backward rules.

use super::{strides_of, Tensor};
use crate::error::{shape_err, CbbError, Result};
use std::cell::Cell;

/// Ridge added to the diagonal when a Cholesky factorization fails once.
pub const RETRY_RIDGE: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-10;

thread_local! {
    static SOLVE_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Number of SPD solves performed on this thread since the last reset.
pub fn solve_count() -> u64 {
    SOLVE_COUNT.with(Cell::get)
}

pub fn reset_solve_count() {
    SOLVE_COUNT.with(|c| c.set(0));
}

fn bump_solve_count() {
    SOLVE_COUNT.with(|c| c.set(c.get() + 1));
}

// ---------------------------------------------------------------------------
// matmul

/// Batch layout of a (possibly broadcast) matrix product.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulPlan {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err(format!(
                "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
            )));
        }
        let (a_batch, a_mat) = a.split_at(a.len() - 2);
        let (b_batch, b_mat) = b.split_at(b.len() - 2);
        let (m, k) = (a_mat[0], a_mat[1]);
        let (k2, n) = (b_mat[0], b_mat[1]);
        if k != k2 {
            return Err(shape_err(format!(
                "matmul inner dimensions differ: {a:?} x {b:?}"
            )));
        }
        let (batch_shape, a_batched, b_batched) = if a_batch == b_batch {
            (a_batch, !a_batch.is_empty(), !b_batch.is_empty())
        } else if b_batch.is_empty() {
            (a_batch, true, false)
        } else if a_batch.is_empty() {
            (b_batch, false, true)
        } else {
            return Err(shape_err(format!(
                "matmul batch dimensions neither match nor broadcast: {a:?} x {b:?}"
            )));
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: batch_shape.iter().product(),
            a_batched,
            b_batched,
            m,
            k,
            n,
            out_shape,
        })
    }
}

/// `out += op(a) * op(b)` for row-major slices, where `op` optionally
/// transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments, unsafe_code)]
pub(crate) fn gemm_acc(
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
) {
    assert!(
        a.len() >= m * k && b.len() >= k * n && out.len() >= m * n,
        "gemm operand too short"
    );
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Row/column strides of op(a) and op(b) in the stored row-major data.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides reach,
    // and `out` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.batch * m * n];
    for bi in 0..plan.batch {
        let ao = if plan.a_batched { bi * m * k } else { 0 };
        let bo = if plan.b_batched { bi * k * n } else { 0 };
        gemm_acc(
            &a.data()[ao..ao + m * k],
            false,
            &b.data()[bo..bo + k * n],
            false,
            m,
            k,
            n,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    finite(Tensor::from_parts(plan.out_shape, out), "matmul")
}

/// Swaps the last two axes.
pub fn transpose(t: &Tensor) -> Result<Tensor> {
    let r = t.rank();
    if r < 2 {
        return Err(shape_err(format!(
            "transpose needs rank >= 2, got {:?}",
            t.shape()
        )));
    }
    let mut perm: Vec<usize> = (0..r).collect();
    perm.swap(r - 2, r - 1);
    permute(t, &perm)
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let r = t.rank();
    let mut seen = vec![false; r];
    if perm.len() != r
        || perm
            .iter()
            .any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
    {
        return Err(shape_err(format!(
            "invalid permutation {perm:?} for shape {:?}",
            t.shape()
        )));
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; r];
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(t.data()[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// axis helpers

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(t.shape(), axis)?;
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                out[at(j)] /= sum;
            }
        }
    }
    finite(Tensor::from_parts(t.shape().to_vec(), out), "softmax")
}

/// `dx = y * (dy - sum(dy * y))` along the softmax axis.
pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: f64 = (0..len).map(|j| dy[at(j)] * y[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

/// Sum along `axis`, keeping it as a singleton.
pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(t.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                out[o * inner + i] += t.data()[o * len * inner + j * inner + i];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = 1;
    finite(Tensor::from_parts(shape, out), "sum_axis")
}

// ---------------------------------------------------------------------------
// elementwise

/// How two operands line up under trailing-singleton broadcasting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Broadcast {
    pub out_shape: Vec<usize>,
    /// Divisor mapping an output flat index to an `a` flat index.
    pub a_div: usize,
    pub b_div: usize,
}

impl Broadcast {
    /// Shapes must share rank and leading extents; from the first differing
    /// axis on, one operand must be all ones.
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let err = || shape_err(format!("shapes {a:?} and {b:?} do not broadcast"));
        if a.len() != b.len() {
            return Err(err());
        }
        let Some(p) = a.iter().zip(b).position(|(x, y)| x != y) else {
            return Ok(Self {
                out_shape: a.to_vec(),
                a_div: 1,
                b_div: 1,
            });
        };
        let a_small = a[p..].iter().all(|&d| d == 1);
        let b_small = b[p..].iter().all(|&d| d == 1);
        if a_small {
            Ok(Self {
                out_shape: b.to_vec(),
                a_div: b[p..].iter().product(),
                b_div: 1,
            })
        } else if b_small {
            Ok(Self {
                out_shape: a.to_vec(),
                a_div: 1,
                b_div: a[p..].iter().product(),
            })
        } else {
            Err(err())
        }
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Add => x + y,
            Self::Sub => x - y,
            Self::Mul => x * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
        }
    }
}

pub fn binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let bc = Broadcast::new(a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let out: Vec<f64> = if bc.a_div == 1 && bc.b_div == 1 {
        ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect()
    } else if bc.b_div > 1 {
        ad.chunks(bc.b_div)
            .zip(bd)
            .flat_map(|(xs, &y)| xs.iter().map(move |&x| op.apply(x, y)))
            .collect()
    } else {
        bd.chunks(bc.a_div)
            .zip(ad)
            .flat_map(|(ys, &x)| ys.iter().map(move |&y| op.apply(x, y)))
            .collect()
    };
    finite(Tensor::from_parts(bc.out_shape, out), op.name())
}

/// Sums an output-shaped gradient back onto an operand of `len` elements
/// that was broadcast with divisor `div`.
pub(crate) fn reduce_broadcast(g: &[f64], div: usize, len: usize) -> Vec<f64> {
    if div == 1 {
        return g.to_vec();
    }
    debug_assert_eq!(g.len(), div * len);
    g.chunks(div).map(|c| c.iter().sum()).collect()
}

// ---------------------------------------------------------------------------
// conv2d

fn conv_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if x.len() != 4 {
        return Err(shape_err(format!(
            "conv2d input must be BxCxHxW, got {x:?}"
        )));
    }
    let (b, c, h, wd) = (x[0], x[1], x[2], x[3]);
    if w != [c, c, 3, 3] {
        return Err(shape_err(format!(
            "conv2d kernel must be {c}x{c}x3x3 for a {c}-channel input, got {w:?}"
        )));
    }
    Ok((b, c, h, wd))
}

/// 3x3 cross-correlation, stride 1, zero padding 1, channel preserving.
///
/// Computed as nine shifted `(B*H*W x C) * (C x C)` products in a
/// channel-last layout, one per kernel tap.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (bn, c, h, wd) = conv_dims(x.shape(), w.shape())?;
    let rows = bn * h * wd;
    let xt = to_channel_last(x.data(), bn, c, h * wd);
    let mut out = vec![0.0; rows * c];
    let mut shifted = vec![0.0; rows * c];
    for tap in 0..9 {
        gather_tap(&xt, &mut shifted, bn, c, h, wd, tap);
        gemm_acc(
            &shifted,
            false,
            &tap_weights(w.data(), c, tap),
            false,
            rows,
            c,
            c,
            &mut out,
        );
    }
    let out = from_channel_last(&out, bn, c, h * wd);
    finite(Tensor::from_parts(x.shape().to_vec(), out), "conv2d")
}

/// Returns `(dx, dw)` for [`conv2d`].
pub(crate) fn conv2d_backward(x: &Tensor, w: &Tensor, dout: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (bn, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let rows = bn * h * wd;
    let xt = to_channel_last(x.data(), bn, c, h * wd);
    let gt = to_channel_last(dout, bn, c, h * wd);
    let mut dxt = vec![0.0; rows * c];
    let mut dw = vec![0.0; c * c * 9];
    let mut shifted = vec![0.0; rows * c];
    let mut dtap = vec![0.0; c * c];
    for tap in 0..9 {
        // dW_tap[ci, co] = sum over rows of shifted[row, ci] * g[row, co].
        gather_tap(&xt, &mut shifted, bn, c, h, wd, tap);
        dtap.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(&shifted, true, &gt, false, c, rows, c, &mut dtap);
        for ci in 0..c {
            for co in 0..c {
                dw[(co * c + ci) * 9 + tap] = dtap[ci * c + co];
            }
        }
        // d(shifted) = g W_tap^T, scattered back to the source positions.
        shifted.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(
            &gt,
            false,
            &tap_weights(w.data(), c, tap),
            true,
            rows,
            c,
            c,
            &mut shifted,
        );
        scatter_tap(&shifted, &mut dxt, bn, c, h, wd, tap);
    }
    (from_channel_last(&dxt, bn, c, h * wd), dw)
}

/// `[B, C, N] -> [B, N, C]`.
fn to_channel_last(src: &[f64], b: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..n {
                out[(bi * n + p) * c + ci] = src[(bi * c + ci) * n + p];
            }
        }
    }
    out
}

/// `[B, N, C] -> [B, C, N]`.
fn from_channel_last(src: &[f64], b: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for p in 0..n {
            for ci in 0..c {
                out[(bi * c + ci) * n + p] = src[(bi * n + p) * c + ci];
            }
        }
    }
    out
}

/// Kernel slice for one tap as a `C_in x C_out` matrix.
fn tap_weights(w: &[f64], c: usize, tap: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * c];
    for co in 0..c {
        for ci in 0..c {
            out[ci * c + co] = w[(co * c + ci) * 9 + tap];
        }
    }
    out
}

/// Source pixel read by output `(y, x)` through `tap`, if inside the image.
fn tap_source(y: usize, x: usize, h: usize, w: usize, tap: usize) -> Option<usize> {
    let (sy, sx) = ((y + tap / 3).checked_sub(1)?, (x + tap % 3).checked_sub(1)?);
    (sy < h && sx < w).then_some(sy * w + sx)
}

/// `dst[b, p, :] = src[b, source(p), :]`, zero where the tap reads padding.
fn gather_tap(src: &[f64], dst: &mut [f64], b: usize, c: usize, h: usize, w: usize, tap: usize) {
    let n = h * w;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let d = (bi * n + y * w + x) * c;
                match tap_source(y, x, h, w, tap) {
                    Some(s) => {
                        let s = (bi * n + s) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                    None => dst[d..d + c].iter_mut().for_each(|v| *v = 0.0),
                }
            }
        }
    }
}

/// Adjoint of [`gather_tap`]: `dst[b, source(p), :] += src[b, p, :]`.
fn scatter_tap(src: &[f64], dst: &mut [f64], b: usize, c: usize, h: usize, w: usize, tap: usize) {
    let n = h * w;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                if let Some(s) = tap_source(y, x, h, w, tap) {
                    let d = (bi * n + s) * c;
                    let o = (bi * n + y * w + x) * c;
                    dst[d..d + c]
                        .iter_mut()
                        .zip(&src[o..o + c])
                        .for_each(|(a, v)| *a += v);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// SPD solve

/// Lower Cholesky factor of an SPD matrix, row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    ridge: f64,
}

impl Cholesky {
    /// Factors `s + ridge * I`. Fails on a non-positive pivot.
    pub fn factor(s: &[f64], n: usize, ridge: f64) -> Result<Self> {
        debug_assert_eq!(s.len(), n * n);
        let mut l = vec![0.0; n * n];
        let mut min_pivot = f64::INFINITY;
        for j in 0..n {
            let mut d = s[j * n + j] + ridge;
            for p in 0..j {
                d -= l[j * n + p] * l[j * n + p];
            }
            min_pivot = min_pivot.min(d);
            if d <= 0.0 || !d.is_finite() {
                return Err(numerical("matrix is not positive definite", s, n, ridge, d));
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut v = s[i * n + j];
                for p in 0..j {
                    v -= l[i * n + p] * l[j * n + p];
                }
                l[i * n + j] = v / djj;
            }
        }
        Ok(Self { n, l, ridge })
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `(s + ridge I) w = rhs` for an `n x cols` right-hand side.
    pub fn solve(&self, rhs: &[f64], cols: usize) -> Vec<f64> {
        let n = self.n;
        let l = &self.l;
        let mut w = rhs.to_vec();
        for c in 0..cols {
            for i in 0..n {
                let mut v = w[i * cols + c];
                for p in 0..i {
                    v -= l[i * n + p] * w[p * cols + c];
                }
                w[i * cols + c] = v / l[i * n + i];
            }
            for i in (0..n).rev() {
                let mut v = w[i * cols + c];
                for p in i + 1..n {
                    v -= l[p * n + i] * w[p * cols + c];
                }
                w[i * cols + c] = v / l[i * n + i];
            }
        }
        bump_solve_count();
        w
    }
}

fn numerical(reason: &str, s: &[f64], n: usize, ridge: f64, pivot: f64) -> CbbError {
    let diag = (0..n).map(|i| s[i * n + i] + ridge);
    let (min_diag, max_diag) = diag.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| {
        (lo.min(d), hi.max(d))
    });
    CbbError::Numerical {
        reason: reason.to_string(),
        min_pivot: pivot,
        min_diag,
        max_diag,
    }
}

fn check_square_symmetric(s: &Tensor) -> Result<usize> {
    if s.rank() != 2 || s.shape()[0] != s.shape()[1] {
        return Err(shape_err(format!(
            "solve_spd needs a square matrix, got {:?}",
            s.shape()
        )));
    }
    let n = s.shape()[0];
    let d = s.data();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (d[i * n + j], d[j * n + i]);
            if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs().max(b.abs())) {
                return Err(CbbError::Numerical {
                    reason: format!("matrix is not symmetric at ({i},{j}): {a} vs {b}"),
                    min_pivot: f64::NAN,
                    min_diag: f64::NAN,
                    max_diag: f64::NAN,
                });
            }
        }
    }
    Ok(n)
}

/// Factors `s`, retrying once with [`RETRY_RIDGE`] on the diagonal.
pub fn factor_spd(s: &Tensor) -> Result<Cholesky> {
    let n = check_square_symmetric(s)?;
    Cholesky::factor(s.data(), n, 0.0).or_else(|_| Cholesky::factor(s.data(), n, RETRY_RIDGE))
}

/// Solves `s w = rhs` for SPD `s` (`k x k`) and `rhs` (`k x n`).
pub fn solve_spd(s: &Tensor, rhs: &Tensor) -> Result<Tensor> {
    Ok(solve_spd_with_factor(s, rhs)?.0)
}

pub(crate) fn solve_spd_with_factor(s: &Tensor, rhs: &Tensor) -> Result<(Tensor, Cholesky)> {
    if rhs.rank() != 2 || rhs.shape()[0] != s.shape().first().copied().unwrap_or(0) {
        return Err(shape_err(format!(
            "solve_spd rhs {:?} incompatible with matrix {:?}",
            rhs.shape(),
            s.shape()
        )));
    }
    let chol = factor_spd(s)?;
    let w = chol.solve(rhs.data(), rhs.shape()[1]);
    let w = finite(Tensor::from_parts(rhs.shape().to_vec(), w), "solve_spd")?;
    Ok((w, chol))
}

fn finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    t.check_finite(op)?;
    Ok(t)
}

/// Row-major index helper for tests and oracles.
pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(strides_of(shape)).map(|(i, s)| i * s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let i2 = Tensor::eye(2);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&i2, &b).unwrap().data(), &[3., 4., 5., 6.]);
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn([7, 5], 1.0, &mut rng);
        let b = Tensor::randn([5, 3], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        let diff = got
            .data()
            .iter()
            .zip(&want)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn matmul_broadcasts_rhs_over_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn([3, 4, 5], 1.0, &mut rng);
        let b = Tensor::randn([5, 2], 1.0, &mut rng);
        let got = matmul(&a, &b).unwrap();
        assert_eq!(got.shape(), &[3, 4, 2]);
        for bi in 0..3 {
            let slice = t(&[4, 5], &a.data()[bi * 20..(bi + 1) * 20]);
            let want = naive_matmul(&slice, &b);
            for (g, w) in got.data()[bi * 8..(bi + 1) * 8].iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::zeros([2, 3]);
        assert!(matches!(
            matmul(&a, &Tensor::zeros([2, 3])),
            Err(CbbError::Shape(_))
        ));
        assert!(matmul(&Tensor::zeros([2, 2, 3]), &Tensor::zeros([3, 3, 1])).is_err());
        assert!(matmul(&Tensor::zeros([3]), &a).is_err());
    }

    #[test]
    fn transpose_and_permute() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let at = transpose(&a).unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.data(), &[1., 4., 2., 5., 3., 6.]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 3, 4], 1.0, &mut rng);
        let perm = [2, 0, 1];
        let p = permute(&x, &perm).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute(&p, &inverse_permutation(&perm)).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t(&[2], &[1000., 0.]), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        assert!(matches!(softmax(&s, 1), Err(CbbError::Shape(_))));
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn([2, 5, 3], 4.0, &mut rng);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let sum: f64 = (0..5).map(|j| s.get(&[o, j, i])).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_rules() {
        let bc = Broadcast::new(&[2, 3, 1], &[2, 3, 4]).unwrap();
        assert_eq!(bc.out_shape, vec![2, 3, 4]);
        assert_eq!((bc.a_div, bc.b_div), (4, 1));
        assert!(Broadcast::new(&[2, 1, 4], &[2, 3, 4]).is_err());
        assert!(Broadcast::new(&[3, 4], &[2, 3, 4]).is_err());
        let bc = Broadcast::new(&[2, 3, 4], &[2, 1, 1]).unwrap();
        assert_eq!((bc.a_div, bc.b_div), (1, 12));
    }

    #[test]
    fn binary_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 4, 3], 1.0, &mut rng);
        let z = Tensor::zeros([2, 4, 3]);
        assert_eq!(binary(BinaryOp::Add, &x, &z).unwrap(), x);
        let two = Tensor::full([2, 4, 1], 2.0);
        let y = binary(BinaryOp::Mul, &two, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn conv_identity_and_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = 3;
        let x = Tensor::randn([2, c, 4, 5], 1.0, &mut rng);
        let mut delta = Tensor::zeros([c, c, 3, 3]);
        for ch in 0..c {
            delta.data_mut()[flat_index(&[c, c, 3, 3], &[ch, ch, 1, 1])] = 1.0;
        }
        assert_eq!(conv2d(&x, &delta).unwrap(), x);

        let cst = Tensor::full([1, 1, 4, 4], 0.5);
        let ones = Tensor::ones([1, 1, 3, 3]);
        let y = conv2d(&cst, &ones).unwrap();
        assert_eq!(y.get(&[0, 0, 1, 1]), 4.5);
        assert_eq!(y.get(&[0, 0, 2, 2]), 4.5);
        assert_eq!(y.get(&[0, 0, 0, 0]), 2.0);
        assert!(matches!(
            conv2d(&x, &Tensor::zeros([2, 2, 3, 3])),
            Err(CbbError::Shape(_))
        ));
    }

    #[test]
    fn solve_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rhs = Tensor::randn([3, 2], 1.0, &mut rng);
        assert_eq!(solve_spd(&Tensor::eye(3), &rhs).unwrap(), rhs);
        let w = solve_spd(&t(&[2, 2], &[2., 0., 0., 4.]), &t(&[2, 1], &[2., 4.])).unwrap();
        assert!(w.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn solve_random_spd_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn([8, 8], 1.0, &mut rng);
        let mut s = matmul(&a, &transpose(&a).unwrap()).unwrap();
        for i in 0..8 {
            s.data_mut()[i * 9] += 0.5;
        }
        let rhs = Tensor::randn([8, 3], 1.0, &mut rng);
        let w = solve_spd(&s, &rhs).unwrap();
        let res = matmul(&s, &w).unwrap().max_abs_diff(&rhs);
        assert!(res < 1e-8, "{res}");
    }

    #[test]
    fn solve_retries_with_ridge_then_fails() {
        // PSD but singular: the retry ridge rescues it.
        let s = t(&[2, 2], &[1., 1., 1., 1.]);
        let chol = factor_spd(&s).unwrap();
        assert_eq!(chol.ridge(), RETRY_RIDGE);
        // Indefinite: no rescue.
        let bad = t(&[2, 2], &[1., 0., 0., -1.]);
        let err = solve_spd(&bad, &Tensor::ones([2, 1])).unwrap_err();
        assert!(matches!(err, CbbError::Numerical { .. }));
        assert!(err.to_string().contains("min pivot"));
        let asym = t(&[2, 2], &[1., 0.5, 0., 1.]);
        assert!(solve_spd(&asym, &Tensor::ones([2, 1])).is_err());
    }

    #[test]
    fn solve_counter_counts() {
        reset_solve_count();
        let _ = solve_spd(&Tensor::eye(2), &Tensor::ones([2, 1])).unwrap();
        assert_eq!(solve_count(), 1);
        reset_solve_count();
        assert_eq!(solve_count(), 0);
    }

    #[test]
    fn sum_axis_keeps_singleton() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let s = sum_axis(&x, 1).unwrap();
        assert_eq!(s.shape(), &[2, 1]);
        assert_eq!(s.data(), &[6., 15.]);
        let s0 = sum_axis(&x, 0).unwrap();
        assert_eq!(s0.data(), &[5., 7., 9.]);
    }
}
