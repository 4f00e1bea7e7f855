use crate::error::{shape_err, CbbError, Result};
use crate::tensor::kernels::{
    self, axis_split, conv2d_backward, gemm_acc, inverse_permutation, reduce_broadcast,
    softmax_backward, BinaryOp, Broadcast, Cholesky, MatmulPlan,
};
use crate::tensor::Tensor;
use std::sync::atomic::{AtomicU32, Ordering};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Permute,
    Reshape,
    Softmax,
    SumAxis,
    SumAll,
    AddRow,
    SolveSpd,
    Conv2d,
    CrossEntropy,
}

impl std::str::FromStr for OpKind {
    type Err = CbbError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => Self::Add,
            "sub" => Self::Sub,
            "mul" => Self::Mul,
            "scale" => Self::Scale,
            "matmul" => Self::MatMul,
            "permute" => Self::Permute,
            "reshape" => Self::Reshape,
            "softmax" => Self::Softmax,
            "sum_axis" => Self::SumAxis,
            "sum_all" => Self::SumAll,
            "add_row" => Self::AddRow,
            "solve_spd" => Self::SolveSpd,
            "conv2d" => Self::Conv2d,
            "cross_entropy" => Self::CrossEntropy,
            other => return Err(CbbError::Usage(format!("unknown op kind `{other}`"))),
        })
    }
}

/// Scales the backward contribution of one op kind. Exists so gradient
/// checkers can be shown to fail on a wrong backward rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultInjection {
    pub kind: OpKind,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        op: BinaryOp,
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        plan: MatmulPlan,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    SumAxis {
        a: usize,
        axis: usize,
    },
    SumAll {
        a: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
    },
    SolveSpd {
        s: usize,
        rhs: usize,
        chol: Cholesky,
    },
    Conv2d {
        x: usize,
        w: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary {
                op: BinaryOp::Add, ..
            } => OpKind::Add,
            Op::Binary {
                op: BinaryOp::Sub, ..
            } => OpKind::Sub,
            Op::Binary {
                op: BinaryOp::Mul, ..
            } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::SolveSpd { .. } => OpKind::SolveSpd,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records tensor operations for one forward pass and replays them in
/// reverse to accumulate gradients into leaves marked `requires_grad`.
///
/// Inputs of every node are earlier nodes, so the node list is already a
/// topological order.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    fault: Option<FaultInjection>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<FaultInjection>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Its `requires_grad` flag decides whether backward
    /// accumulates into it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad()
    }

    /// Moves the accumulated gradient of `v` out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        let i = self.check(v);
        self.nodes[i].value.take_grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(
            v.tape, self.id,
            "Var used with a tape that did not create it"
        );
        v.idx
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[self.check(v)]
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value: value.with_requires_grad(requires_grad),
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let out = kernels::binary(op, &self.nodes[ia].value, &self.nodes[ib].value)?;
        let bc = Broadcast::new(self.nodes[ia].value.shape(), self.nodes[ib].value.shape())?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(
            out,
            Op::Binary {
                op,
                a: ia,
                b: ib,
                bc,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    /// Entrywise product; equal shapes or trailing-singleton broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Product with one operand broadcast along trailing singleton axes,
    /// e.g. `[B, N, 1]` against `[B, N, C]`. Same rule as [`Tape::mul`].
    pub fn broadcast_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a);
        let x = &self.nodes[ia].value;
        let data = x.data().iter().map(|v| v * factor).collect();
        let out =
            Tensor::new(x.shape().to_vec(), data).map_err(|_| CbbError::NonFinite("scale"))?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Scale { a: ia, factor }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let out = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let plan = MatmulPlan::new(self.nodes[ia].value.shape(), self.nodes[ib].value.shape())?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul { a: ia, b: ib, plan }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let out = kernels::permute(&self.nodes[ia].value, perm)?;
        let rg = self.rg(ia);
        Ok(self.push(
            out,
            Op::Permute {
                a: ia,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(shape_err(format!(
                "transpose needs rank >= 2, got {:?}",
                self.shape(a)
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a);
        let out = self.nodes[ia].value.reshape(shape.to_vec())?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Reshape { a: ia }, rg))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a);
        let out = kernels::softmax(&self.nodes[ia].value, axis)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::Softmax { a: ia, axis }, rg))
    }

    /// Sum along `axis`, kept as a singleton axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a);
        let out = kernels::sum_axis(&self.nodes[ia].value, axis)?;
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SumAxis { a: ia, axis }, rg))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    /// Sum of all entries as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let total: f64 = self.nodes[ia].value.data().iter().sum();
        if !total.is_finite() {
            return Err(CbbError::NonFinite("sum"));
        }
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(total), Op::SumAll { a: ia }, rg))
    }

    /// Adds a length-`n` row vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(bias));
        let (x, b) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = *x
            .shape()
            .last()
            .ok_or_else(|| shape_err("add_row on a scalar"))?;
        if b.shape() != [n] {
            return Err(shape_err(format!(
                "bias shape {:?} does not match last axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let out =
            Tensor::new(x.shape().to_vec(), data).map_err(|_| CbbError::NonFinite("add_row"))?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::AddRow { a: ia, bias: ib }, rg))
    }

    /// Solves `s w = rhs` for symmetric positive definite `s` by Cholesky,
    /// retrying once with a small diagonal ridge.
    pub fn solve_spd(&mut self, s: Var, rhs: Var) -> Result<Var> {
        let (is, ir) = (self.check(s), self.check(rhs));
        let (out, chol) =
            kernels::solve_spd_with_factor(&self.nodes[is].value, &self.nodes[ir].value)?;
        let rg = self.rg(is) || self.rg(ir);
        Ok(self.push(
            out,
            Op::SolveSpd {
                s: is,
                rhs: ir,
                chol,
            },
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.check(x), self.check(w));
        let out = kernels::conv2d(&self.nodes[ix].value, &self.nodes[iw].value)?;
        let rg = self.rg(ix) || self.rg(iw);
        Ok(self.push(out, Op::Conv2d { x: ix, w: iw }, rg))
    }

    /// Mean cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits);
        let x = &self.nodes[il].value;
        let [b, k] = x.shape() else {
            return Err(shape_err(format!(
                "cross_entropy needs [B, K] logits, got {:?}",
                x.shape()
            )));
        };
        let (b, k) = (*b, *k);
        if labels.len() != b {
            return Err(shape_err(format!(
                "{} labels for batch of {b}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(shape_err(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = kernels::softmax(x, 1)?.into_data();
        let mut loss = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let z = &x.data()[row * k..(row + 1) * k];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[y];
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(CbbError::NonFinite("cross_entropy"));
        }
        let rg = self.rg(il);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// the leaves already hold, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss);
        if self.nodes[root].value.numel() != 1 {
            return Err(CbbError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            let scale = match self.fault {
                Some(f) if f.kind == node.op.kind() => f.factor,
                _ => 1.0,
            };
            for (input, mut contrib) in self.local_grads(i, &g) {
                if scale != 1.0 {
                    contrib.iter_mut().for_each(|v| *v *= scale);
                }
                match &mut adj[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        for (i, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CbbError::NonFinite("backward"));
                }
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    node.value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs, given its output
    /// adjoint `g`. Inputs that do not require a gradient are skipped.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
        let val = |j: usize| &self.nodes[j].value;
        let mut out = Vec::with_capacity(2);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Binary { op, a, b, bc } => {
                let (a, b) = (*a, *b);
                let (na, nb) = (val(a).numel(), val(b).numel());
                if self.rg(a) {
                    let full: Vec<f64> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(k, gv)| gv * val(b).data()[k / bc.b_div])
                            .collect(),
                    };
                    out.push((a, reduce_broadcast(&full, bc.a_div, na)));
                }
                if self.rg(b) {
                    let full: Vec<f64> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|v| -v).collect(),
                        BinaryOp::Mul => g
                            .iter()
                            .enumerate()
                            .map(|(k, gv)| gv * val(a).data()[k / bc.a_div])
                            .collect(),
                    };
                    out.push((b, reduce_broadcast(&full, bc.b_div, nb)));
                }
            }
            Op::Scale { a, factor } => {
                out.push((*a, g.iter().map(|v| v * factor).collect()));
            }
            Op::MatMul { a, b, plan } => {
                let (a, b) = (*a, *b);
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (ad, bd) = (val(a).data(), val(b).data());
                if self.rg(a) {
                    let mut da = vec![0.0; ad.len()];
                    for bi in 0..plan.batch {
                        let ao = if plan.a_batched { bi * m * k } else { 0 };
                        let bo = if plan.b_batched { bi * k * n } else { 0 };
                        gemm_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bd[bo..bo + k * n],
                            true,
                            m,
                            n,
                            k,
                            &mut da[ao..ao + m * k],
                        );
                    }
                    out.push((a, da));
                }
                if self.rg(b) {
                    let mut db = vec![0.0; bd.len()];
                    for bi in 0..plan.batch {
                        let ao = if plan.a_batched { bi * m * k } else { 0 };
                        let bo = if plan.b_batched { bi * k * n } else { 0 };
                        gemm_acc(
                            &ad[ao..ao + m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            k,
                            m,
                            n,
                            &mut db[bo..bo + k * n],
                        );
                    }
                    out.push((b, db));
                }
            }
            Op::Permute { a, perm } => {
                let gt = Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g.to_vec());
                let back = kernels::permute(&gt, &inverse_permutation(perm))
                    .expect("inverse of a valid permutation");
                out.push((*a, back.into_data()));
            }
            Op::Reshape { a } => out.push((*a, g.to_vec())),
            Op::Softmax { a, axis } => {
                let y = &self.nodes[i].value;
                let (o, l, inn) = axis_split(y.shape(), *axis).expect("axis validated in forward");
                out.push((*a, softmax_backward(y.data(), g, o, l, inn)));
            }
            Op::SumAxis { a, axis } => {
                let (o, l, inn) = axis_split(val(*a).shape(), *axis).expect("axis validated");
                let mut d = vec![0.0; o * l * inn];
                for oo in 0..o {
                    for j in 0..l {
                        for ii in 0..inn {
                            d[oo * l * inn + j * inn + ii] = g[oo * inn + ii];
                        }
                    }
                }
                out.push((*a, d));
            }
            Op::SumAll { a } => out.push((*a, vec![g[0]; val(*a).numel()])),
            Op::AddRow { a, bias } => {
                if self.rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.rg(*bias) {
                    let n = val(*bias).numel();
                    let mut db = vec![0.0; n];
                    for (k, gv) in g.iter().enumerate() {
                        db[k % n] += gv;
                    }
                    out.push((*bias, db));
                }
            }
            Op::SolveSpd { s, rhs, chol } => {
                let cols = val(*rhs).shape()[1];
                let kdim = chol.dim();
                // dRhs = S^-1 dOut ; dS = -dRhs W^T, symmetrized.
                let drhs = chol.solve(g, cols);
                if self.rg(*s) {
                    let w = self.nodes[i].value.data();
                    let mut ds = vec![0.0; kdim * kdim];
                    gemm_acc(&drhs, false, w, true, kdim, cols, kdim, &mut ds);
                    let mut sym = vec![0.0; kdim * kdim];
                    for r in 0..kdim {
                        for c in 0..kdim {
                            sym[r * kdim + c] = -0.5 * (ds[r * kdim + c] + ds[c * kdim + r]);
                        }
                    }
                    out.push((*s, sym));
                }
                if self.rg(*rhs) {
                    out.push((*rhs, drhs));
                }
            }
            Op::Conv2d { x, w } => {
                let (dx, dw) = conv2d_backward(val(*x), val(*w), g);
                if self.rg(*x) {
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    out.push((*w, dw));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0] / b as f64).collect();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * k + y] -= g[0] / b as f64;
                }
                out.push((*logits, d));
            }
        }
        out.retain(|(j, _)| self.rg(*j));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec())
            .unwrap()
            .with_requires_grad(true)
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[4], &[1., -2., 3., 0.5]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn grad_of_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], &[1., 2.]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(CbbError::Usage(_))));
    }

    #[test]
    fn constants_and_non_grad_leaves_get_nothing() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], &[1., 2.]));
        let c = tape.constant(Tensor::new([2], vec![3., 4.]).unwrap());
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3., 4.]);
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(param(&[1, 2, 1], &[2., 3.]));
        let x = tape.leaf(param(&[1, 2, 3], &[1., 2., 3., 4., 5., 6.]));
        let y = tape.broadcast_mul(a, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[6., 15.]);
        assert_eq!(tape.grad(x).unwrap(), &[2., 2., 2., 3., 3., 3.]);
        let bad = tape.leaf(param(&[1, 3, 1], &[1., 1., 1.]));
        assert!(tape.broadcast_mul(bad, x).is_err());
    }

    #[test]
    fn cross_entropy_value_and_grad() {
        let mut tape = Tape::new();
        let z = tape.leaf(param(&[1, 2], &[0., 0.]));
        let l = tape.cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.5, -0.5]);
        assert!(tape.cross_entropy(z, &[2]).is_err());
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = Tensor::randn([3, 4], 1.0, &mut rng).with_requires_grad(true);
        let wv = Tensor::randn([4, 2], 1.0, &mut rng);
        let run = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let w = tape.constant(wv.clone());
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax(y, 1).unwrap();
            let l1 = tape.cross_entropy(y, &[0, 1, 1]).unwrap();
            let l2 = tape.sum(s).unwrap();
            let l2 = tape.scale(l2, 0.3).unwrap();
            match which {
                0 => {
                    let t = tape.add(l1, l2).unwrap();
                    tape.backward(t).unwrap();
                }
                _ => {
                    tape.backward(l1).unwrap();
                    tape.backward(l2).unwrap();
                }
            }
            tape.grad(x).unwrap().to_vec()
        };
        let (a, b) = (run(0), run(1));
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn fault_injection_scales_one_rule() {
        let mut tape = Tape::new();
        tape.inject_fault(Some(FaultInjection {
            kind: OpKind::SumAll,
            factor: 2.0,
        }));
        let x = tape.leaf(param(&[2], &[1., 2.]));
        let l = tape.sum(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2., 2.]);
    }

    #[test]
    #[should_panic(expected = "did not create it")]
    fn foreign_var_panics() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(Tensor::ones([1]));
        let _ = t2.sum(x);
    }
}
