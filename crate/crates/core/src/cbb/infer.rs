//! Inference path: the projection `B^T (B B^T + ridge I)^-1 B` is computed
//! once per branch and applied as a plain `C x C` product, with no solve and
//! no tape.

use super::params::{BasisSet, Branch, CbbParams};
use crate::error::{shape_err, CbbError, Result};
use crate::tensor::kernels::{self, BinaryOp};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ProjectionCache {
    x_proj: Tensor,
    /// `None` when branches are shared.
    m_proj: Option<Tensor>,
    stamp: u64,
}

impl ProjectionCache {
    pub fn x_proj(&self) -> &Tensor {
        &self.x_proj
    }

    pub fn m_proj(&self) -> &Tensor {
        self.m_proj.as_ref().unwrap_or(&self.x_proj)
    }

    /// True once `params` has been mutated since the cache was built.
    pub fn is_stale(&self, params: &CbbParams) -> bool {
        self.stamp != params.stamp()
    }
}

/// `B^T (B B^T + ridge I)^-1 B` for one basis set.
pub fn projection_matrix(basis: &BasisSet) -> Result<Tensor> {
    let w = kernels::solve_spd(&basis.gram(), &basis.bases)?;
    kernels::matmul(&kernels::transpose(&basis.bases)?, &w)
}

pub fn precompute_projection(params: &CbbParams) -> Result<ProjectionCache> {
    let x_proj = projection_matrix(&params.x_branch().basis)?;
    let m_proj = if params.shares_branches() {
        None
    } else {
        Some(projection_matrix(&params.m_branch().basis)?)
    };
    Ok(ProjectionCache {
        x_proj,
        m_proj,
        stamp: params.stamp(),
    })
}

/// Spatial weighting map `A` (`B x N x 1`) for one branch, untracked.
pub fn weighting_map(features: &Tensor, branch: &Branch) -> Result<Tensor> {
    let resp = kernels::matmul(features, &kernels::transpose(&branch.queries.queries)?)?;
    let p = kernels::softmax(&resp, 2)?;
    kernels::sum_axis(&kernels::binary(BinaryOp::Mul, &p, &resp)?, 2)
}

fn branch_expectation(features: &Tensor, branch: &Branch, proj: &Tensor) -> Result<Tensor> {
    let a = weighting_map(features, branch)?;
    let xq = kernels::binary(BinaryOp::Mul, &a, features)?;
    kernels::matmul(&xq, proj)
}

/// Untracked mediator convolution on `B x N x C` features.
pub fn mediator_untracked(x: &Tensor, conv_w: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [b, n, c] = *x.shape() else {
        return Err(shape_err(format!(
            "features must be B x N x C, got {:?}",
            x.shape()
        )));
    };
    if n != h * w {
        return Err(shape_err(format!("N = {n} but H x W = {h} x {w}")));
    }
    let img = kernels::permute(x, &[0, 2, 1])?.reshape([b, c, h, w])?;
    let conv = kernels::conv2d(&img, conv_w)?.reshape([b, c, n])?;
    kernels::permute(&conv, &[0, 2, 1])
}

/// Output of [`cbb_infer_parts`].
#[derive(Debug, Clone)]
pub struct InferParts {
    pub output: Tensor,
    pub expected_x: Tensor,
    pub expected_m: Tensor,
    pub mediator: Tensor,
}

pub fn cbb_infer_parts(
    x_in: &Tensor,
    params: &CbbParams,
    cache: &ProjectionCache,
    h: usize,
    w: usize,
) -> Result<InferParts> {
    if cache.is_stale(params) {
        return Err(CbbError::Usage(
            "projection cache is stale; parameters changed since it was computed".into(),
        ));
    }
    match x_in.shape() {
        [_, _, c] if *c == params.channels() => {}
        other => {
            return Err(shape_err(format!(
                "features must be B x N x {}, got {other:?}",
                params.channels()
            )))
        }
    }
    let expected_x = branch_expectation(x_in, params.x_branch(), cache.x_proj())?;
    let mediator = mediator_untracked(x_in, params.conv_w(), h, w)?;
    let expected_m = branch_expectation(&mediator, params.m_branch(), cache.m_proj())?;
    let output = kernels::binary(
        BinaryOp::Add,
        &kernels::binary(BinaryOp::Add, &expected_x, &expected_m)?,
        &mediator,
    )?;
    Ok(InferParts {
        output,
        expected_x,
        expected_m,
        mediator,
    })
}

/// Same contract as [`super::cbb_forward`], using the cached projections.
pub fn cbb_infer(
    x_in: &Tensor,
    params: &CbbParams,
    cache: &ProjectionCache,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    Ok(cbb_infer_parts(x_in, params, cache, h, w)?.output)
}
