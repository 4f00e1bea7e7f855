//! Differentiable forward pass of the block, recorded on a [`Tape`].

use super::params::CbbParams;
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Tape handles for one branch's learnables.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub bases: Var,
    pub queries: Var,
    pub ridge: f64,
}

/// Tape handles for a whole block.
#[derive(Debug, Clone, Copy)]
pub struct CbbVars {
    pub x: BranchVars,
    /// `None` when the two expectation branches share parameters.
    pub m: Option<BranchVars>,
    pub conv_w: Var,
}

impl CbbVars {
    pub fn m_branch(&self) -> BranchVars {
        self.m.unwrap_or(self.x)
    }

    /// Handles in [`CbbParams::learnables`] order.
    pub fn learnables(&self) -> Vec<Var> {
        let mut v = vec![self.x.bases, self.x.queries];
        if let Some(m) = self.m {
            v.extend([m.bases, m.queries]);
        }
        v.push(self.conv_w);
        v
    }
}

impl CbbParams {
    /// Records every learnable as a gradient-carrying leaf.
    pub fn register(&self, tape: &mut Tape) -> CbbVars {
        let branch = |tape: &mut Tape, b: &super::Branch| BranchVars {
            bases: tape.leaf(b.basis.bases.clone().with_requires_grad(true)),
            queries: tape.leaf(b.queries.queries.clone().with_requires_grad(true)),
            ridge: b.basis.ridge,
        };
        let x = branch(tape, self.x_branch());
        let m = if self.shares_branches() {
            None
        } else {
            Some(branch(tape, self.m_branch()))
        };
        let conv_w = tape.leaf(self.conv_w().clone().with_requires_grad(true));
        CbbVars { x, m, conv_w }
    }

    /// Moves gradients from a tape back into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &mut Tape, vars: &CbbVars) -> Result<()> {
        for (t, v) in self.learnables_mut().into_iter().zip(vars.learnables()) {
            if let Some(g) = tape.take_grad(v) {
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

fn check_features(tape: &Tape, x: Var, channels: usize) -> Result<(usize, usize)> {
    match tape.shape(x) {
        [b, n, c] if *c == channels => Ok((*b, *n)),
        other => Err(shape_err(format!(
            "features must be B x N x {channels}, got {other:?}"
        ))),
    }
}

/// Query responses `X'_q = X_in Q_s^T` (`B x N x S`).
pub fn query_response(tape: &mut Tape, x_in: Var, queries: Var) -> Result<Var> {
    let c = tape.shape(queries)[1];
    check_features(tape, x_in, c)?;
    let qt = tape.transpose(queries)?;
    tape.matmul(x_in, qt)
}

/// Expected spatial weighting `A = sum_s softmax_s(X'_q) * X'_q`
/// (`B x N x 1`).
pub fn spatial_weighting(tape: &mut Tape, responses: Var) -> Result<Var> {
    let last = tape
        .shape(responses)
        .len()
        .checked_sub(1)
        .ok_or_else(|| shape_err("spatial weighting of a scalar"))?;
    let p = tape.softmax(responses, last)?;
    let weighted = tape.mul(p, responses)?;
    tape.sum_axis(weighted, last)
}

/// `X_q = A * X_in`, broadcasting `A` over channels.
pub fn reweight(tape: &mut Tape, x_in: Var, a: Var) -> Result<Var> {
    let (xs, as_) = (tape.shape(x_in), tape.shape(a));
    if xs.len() != 3 || as_ != [xs[0], xs[1], 1] {
        return Err(shape_err(format!(
            "weighting map {as_:?} does not match features {xs:?}"
        )));
    }
    tape.broadcast_mul(a, x_in)
}

/// Least-squares coefficients `C = X_q B^T (B B^T + ridge I)^-1`
/// (`B x N x K`), computed as `X_q (G^-1 B)^T` with one SPD solve.
pub fn estimate_coefficients(tape: &mut Tape, x_q: Var, basis: BranchVars) -> Result<Var> {
    let c = tape.shape(basis.bases)[1];
    let k = tape.shape(basis.bases)[0];
    check_features(tape, x_q, c)?;
    let bt = tape.transpose(basis.bases)?;
    let mut gram = tape.matmul(basis.bases, bt)?;
    if basis.ridge != 0.0 {
        let ridge = Tensor::eye(k);
        let ridge = tape.constant(ridge);
        let ridge = tape.scale(ridge, basis.ridge)?;
        gram = tape.add(gram, ridge)?;
    }
    let w = tape.solve_spd(gram, basis.bases)?;
    let wt = tape.transpose(w)?;
    tape.matmul(x_q, wt)
}

/// `E[.] ~= C B` (`B x N x C`).
pub fn reconstruct_expectation(tape: &mut Tape, coeffs: Var, bases: Var) -> Result<Var> {
    tape.matmul(coeffs, bases)
}

/// Mediator features: a single 3x3 channel-preserving convolution applied
/// to the `B x N x C` features viewed as `B x C x H x W`.
pub fn mediator(tape: &mut Tape, x_in: Var, conv_w: Var, h: usize, w: usize) -> Result<Var> {
    let [b, n, c] = *tape.shape(x_in) else {
        return Err(shape_err(format!(
            "features must be B x N x C, got {:?}",
            tape.shape(x_in)
        )));
    };
    if n != h * w {
        return Err(shape_err(format!("N = {n} but H x W = {h} x {w}")));
    }
    let chw = tape.permute(x_in, &[0, 2, 1])?;
    let img = tape.reshape(chw, &[b, c, h, w])?;
    let conv = tape.conv2d(img, conv_w)?;
    let flat = tape.reshape(conv, &[b, c, n])?;
    tape.permute(flat, &[0, 2, 1])
}

/// Intermediate handles of one expectation branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchTrace {
    pub responses: Var,
    pub weighting: Var,
    pub reweighted: Var,
    pub coefficients: Var,
    pub expectation: Var,
}

/// Runs query response, spatial weighting, reweighting, coefficient
/// estimation and reconstruction on `features`.
pub fn expectation_branch(
    tape: &mut Tape,
    features: Var,
    branch: BranchVars,
) -> Result<BranchTrace> {
    let responses = query_response(tape, features, branch.queries)?;
    let weighting = spatial_weighting(tape, responses)?;
    let reweighted = reweight(tape, features, weighting)?;
    let coefficients = estimate_coefficients(tape, reweighted, branch)?;
    let expectation = reconstruct_expectation(tape, coefficients, branch.bases)?;
    Ok(BranchTrace {
        responses,
        weighting,
        reweighted,
        coefficients,
        expectation,
    })
}

/// Handles produced by [`cbb_forward`].
#[derive(Debug, Clone, Copy)]
pub struct CbbTrace {
    pub output: Var,
    pub x_branch: BranchTrace,
    pub m_branch: BranchTrace,
    pub mediator: Var,
}

impl CbbTrace {
    pub fn expected_x(&self) -> Var {
        self.x_branch.expectation
    }

    pub fn expected_m(&self) -> Var {
        self.m_branch.expectation
    }
}

/// `F_out = E[X] + E[M] + M` with `M = Conv(X_in)`.
pub fn cbb_forward(
    tape: &mut Tape,
    x_in: Var,
    vars: &CbbVars,
    h: usize,
    w: usize,
) -> Result<CbbTrace> {
    let x_branch = expectation_branch(tape, x_in, vars.x)?;
    let m = mediator(tape, x_in, vars.conv_w, h, w)?;
    let m_branch = expectation_branch(tape, m, vars.m_branch())?;
    let sum = tape.add(x_branch.expectation, m_branch.expectation)?;
    let output = tape.add(sum, m)?;
    Ok(CbbTrace {
        output,
        x_branch,
        m_branch,
        mediator: m,
    })
}
