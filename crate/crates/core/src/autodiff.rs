//! Tape-based reverse-mode differentiation over a small, fixed set of dense
//! matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass. Variables are
//! plain indices into the tape. [`Tape::backward`] walks the tape in
//! reverse and returns the gradient of a scalar output with respect to every
//! node that depends on a parameter leaf.
//!
//! The op set is closed: matmul (optionally against a transposed right
//! factor), add, elementwise multiply, tanh, row concatenation, row mean,
//! row-wise squared distance, sum, scalar scaling, and multiplication by a
//! constant sparse matrix on the left.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::sparse::SparseMatrix;
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    SqDistRows(Var, Var),
    Sum(Var),
    Scale(Var, f64),
    SparseLeft(Arc<SparseMatrix>, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "{what} produced a non-finite value"
        )))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A free leaf that receives a gradient (not tied to a parameter set).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Leaf for parameter `index` of `params`.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        self.push(
            params.value(index).clone(),
            Op::Leaf { param: Some(index) },
            true,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = gemm(self.value(a), false, self.value(b), false)?;
        check_finite(&v, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            v,
            Op::MatMul {
                a,
                b,
                transpose_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = gemm(self.value(a), false, self.value(b), true)?;
        check_finite(&v, "matmul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            v,
            Op::MatMul {
                a,
                b,
                transpose_b: true,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), 1.0);
        check_finite(&v, "add")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        check_finite(&v, "mul")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        check_finite(&v, "tanh")?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Tanh(a), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::Argument(format!(
                    "concat_rows: {} columns vs {cols}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(Error::Argument("mean_rows of an empty matrix".into()));
        }
        let v = self.value(a).mean_rows();
        check_finite(&v, "mean_rows")?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MeanRows(a), rg))
    }

    /// Column vector of `‖a_r − b_r‖²` per row.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sq_dist_rows")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = (0..ta.rows())
            .map(|r| {
                ta.row(r)
                    .iter()
                    .zip(tb.row(r))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let v = Tensor::from_vec(ta.rows(), 1, data)?;
        check_finite(&v, "sq_dist_rows")?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::SqDistRows(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        check_finite(&v, "sum")?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sum(a), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        check_finite(&v, "scale")?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Scale(a, s), rg))
    }

    /// `s · b` for a constant sparse `s`.
    pub fn sparse_left(&mut self, s: Arc<SparseMatrix>, b: Var) -> Result<Var> {
        let v = s.mul_dense(self.value(b))?;
        check_finite(&v, "sparse_left")?;
        let rg = self.rg(b);
        Ok(self.push(v, Op::SparseLeft(s, b), rg))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, delta: Tensor| -> Result<()> {
                if !self.rg(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_scaled(&delta, 1.0),
                    slot @ None => *slot = Some(delta),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::MatMul { a, b, transpose_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        // C = A·B → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                        acc(*a, gemm(&g, false, vb, !*transpose_b)?)?;
                    }
                    if self.rg(*b) {
                        let db = if *transpose_b {
                            gemm(&g, true, va, false)?
                        } else {
                            gemm(va, true, &g, false)?
                        };
                        acc(*b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut d = g.clone();
                        d.data_mut()
                            .iter_mut()
                            .zip(vb.data())
                            .for_each(|(x, y)| *x *= y);
                        acc(*a, d)?;
                    }
                    if self.rg(*b) {
                        let mut d = g;
                        d.data_mut()
                            .iter_mut()
                            .zip(va.data())
                            .for_each(|(x, y)| *x *= y);
                        acc(*b, d)?;
                    }
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    d.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(x, y)| *x *= 1.0 - y * y);
                    acc(*a, d)?;
                }
                Op::ConcatRows(parts) => {
                    let cols = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let slice = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        acc(p, Tensor::from_vec(rows, cols, slice)?)?;
                    }
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let inv = 1.0 / rows as f64;
                    let mut d = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for (x, y) in d.row_mut(r).iter_mut().zip(g.data()) {
                            *x = y * inv;
                        }
                    }
                    acc(*a, d)?;
                }
                Op::SqDistRows(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let mut d = va.clone();
                    for r in 0..d.rows() {
                        let gr = 2.0 * g.get(r, 0);
                        for (x, y) in d.row_mut(r).iter_mut().zip(vb.row(r)) {
                            *x = gr * (*x - y);
                        }
                    }
                    if self.rg(*b) {
                        acc(*b, d.map(|x| -x))?;
                    }
                    acc(*a, d)?;
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    acc(*a, Tensor::filled(rows, cols, g.item()?))?;
                }
                Op::Scale(a, s) => {
                    acc(*a, g.map(|x| x * s))?;
                }
                Op::SparseLeft(s, b) => {
                    acc(*b, s.transpose().mul_dense(&g)?)?;
                }
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at tape node {i}"
                    )));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of a backward pass. Only leaves keep their gradient.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds leaf gradients into the matching parameters. Parameters the loss
    /// does not reach get an explicit zero gradient.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for i in 0..params.len() {
            params.ensure_grad(i);
        }
        for &(p, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                params.add_grad(p, g);
            }
        }
    }
}
