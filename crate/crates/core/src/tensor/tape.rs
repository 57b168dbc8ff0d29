//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a
//! node holding its output value. [`Tape::backward`] walks the record once in
//! reverse, propagating adjoints, and adds the parameter gradients into the
//! [`ParamStore`] accumulators. Accumulation is additive; callers zero it
//! explicitly with [`ParamStore::zero_grad`].
//!
//! Batched data is laid out one example per column, so `W x` for a batch is
//! a single matrix product and per-unit vectors (biases, peepholes) broadcast
//! along columns.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{gemm, Matrix};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named trainable matrices with their gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set_value",
                lhs: slot.value.shape(),
                rhs: value.shape(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.as_slice().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.grad.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                op: "ParamStore::set_flat_values",
                lhs: (self.num_scalars(), 1),
                rhs: (flat.len(), 1),
            });
        }
        if let Some(index) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddCol(usize, usize),
    Mul(usize, usize),
    MulCol(usize, usize),
    MulRow(usize, usize),
    MulConst(usize, Matrix),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    SoftmaxCols(usize),
    SumSquares(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Single-threaded record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
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
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(v.idx)
    }

    fn node(&self, v: Var) -> Result<(usize, &Node)> {
        let i = self.idx(v)?;
        Ok((i, &self.nodes[i]))
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[self.idx(v).expect("var from another tape")].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, na) = self.node(a)?;
        let (ib, nb) = self.node(b)?;
        if na.value.shape() != nb.value.shape() {
            return Err(Error::Shape {
                op,
                lhs: na.value.shape(),
                rhs: nb.value.shape(),
            });
        }
        Ok((ia, ib))
    }

    fn grad_flag(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let (ib, nb) = self.node(b)?;
        if na.value.cols() != nb.value.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: na.value.shape(),
                rhs: nb.value.shape(),
            });
        }
        let mut out = Matrix::zeros(na.value.rows(), nb.value.cols());
        gemm(&na.value, false, &nb.value, false, 1.0, &mut out);
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), g))
    }

    fn zip_with(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let a = &self.nodes[ia].value;
        let b = &self.nodes[ib].value;
        Matrix::from_raw(
            a.rows(),
            a.cols(),
            a.as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x + y);
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::Add(ia, ib), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x - y);
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::Sub(ia, ib), g))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("mul", a, b)?;
        let out = self.zip_with(ia, ib, |x, y| x * y);
        let g = self.grad_flag(&[ia, ib]);
        Ok(self.push(out, Op::Mul(ia, ib), g))
    }

    fn check_col(&self, op: &'static str, a: Var, col: Var) -> Result<(usize, usize)> {
        let (ia, na) = self.node(a)?;
        let (ic, nc) = self.node(col)?;
        if nc.value.shape() != (na.value.rows(), 1) {
            return Err(Error::Shape {
                op,
                lhs: na.value.shape(),
                rhs: nc.value.shape(),
            });
        }
        Ok((ia, ic))
    }

    /// `a + col`, with the column vector broadcast across every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = self.check_col("add_col", a, col)?;
        let av = &self.nodes[ia].value;
        let cv = self.nodes[ic].value.as_slice();
        let out = Matrix::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) + cv[r]);
        let g = self.grad_flag(&[ia, ic]);
        Ok(self.push(out, Op::AddCol(ia, ic), g))
    }

    /// `a ⊙ col`, with the column vector broadcast across columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = self.check_col("mul_col", a, col)?;
        let av = &self.nodes[ia].value;
        let cv = self.nodes[ic].value.as_slice();
        let out = Matrix::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) * cv[r]);
        let g = self.grad_flag(&[ia, ic]);
        Ok(self.push(out, Op::MulCol(ia, ic), g))
    }

    /// `a ⊙ row`, with a 1×B row broadcast down every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let (ir, nr) = self.node(row)?;
        if nr.value.shape() != (1, na.value.cols()) {
            return Err(Error::Shape {
                op: "mul_row",
                lhs: na.value.shape(),
                rhs: nr.value.shape(),
            });
        }
        let av = &na.value;
        let rv = nr.value.as_slice();
        let out = Matrix::from_fn(av.rows(), av.cols(), |r, c| av.get(r, c) * rv[c]);
        let g = self.grad_flag(&[ia, ir]);
        Ok(self.push(out, Op::MulRow(ia, ir), g))
    }

    /// Multiplies by a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        if na.value.shape() != mask.shape() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: na.value.shape(),
                rhs: mask.shape(),
            });
        }
        let out = Matrix::from_raw(
            mask.rows(),
            mask.cols(),
            na.value
                .as_slice()
                .iter()
                .zip(mask.as_slice())
                .map(|(x, m)| x * m)
                .collect(),
        );
        let g = self.nodes[ia].needs_grad;
        Ok(self.push(out, Op::MulConst(ia, mask), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let out = na.value.map(|x| x * s);
        let g = na.needs_grad;
        Ok(self.push(out, Op::Scale(ia, s), g))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let out = na.value.map(f);
        let g = na.needs_grad;
        Ok(self.push(out, op(ia), g))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, super::sigmoid_scalar, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let first = idxs
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.nodes[*first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.nodes[*first].value.shape(),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.as_slice());
        }
        let g = self.grad_flag(&idxs);
        Ok(self.push(Matrix::from_raw(rows, cols, data), Op::ConcatRows(idxs), g))
    }

    /// Joins matrices side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idxs = parts
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let first = idxs
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.nodes[*first].value.rows();
        let mut cols = 0;
        for &i in &idxs {
            let v = &self.nodes[i].value;
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.nodes[*first].value.shape(),
                    rhs: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idxs {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let g = self.grad_flag(&idxs);
        Ok(self.push(Matrix::from_raw(rows, cols, data), Op::ConcatCols(idxs), g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let v = &na.value;
        if start + len > v.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: v.shape(),
                rhs: (start + len, v.cols()),
            });
        }
        let out = Matrix::from_raw(
            len,
            v.cols(),
            v.as_slice()[start * v.cols()..(start + len) * v.cols()].to_vec(),
        );
        let g = na.needs_grad;
        Ok(self.push(out, Op::SliceRows(ia, start), g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let v = &na.value;
        if start + len > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: v.shape(),
                rhs: (v.rows(), start + len),
            });
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let g = na.needs_grad;
        Ok(self.push(Matrix::from_raw(v.rows(), len, data), Op::SliceCols(ia, start), g))
    }

    /// Softmax down each column independently.
    pub fn softmax_cols(&mut self, a: Var) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let v = &na.value;
        let mut out = Matrix::zeros(v.rows(), v.cols());
        for c in 0..v.cols() {
            let col = v.col_vec(c);
            let s = super::softmax(&col)?;
            for (r, x) in s.into_iter().enumerate() {
                out.as_mut_slice()[r * v.cols() + c] = x;
            }
        }
        let g = na.needs_grad;
        Ok(self.push(out, Op::SoftmaxCols(ia), g))
    }

    /// Σ a², as a 1×1 node.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let (ia, na) = self.node(a)?;
        let s = na.value.as_slice().iter().map(|x| x * x).sum();
        let g = na.needs_grad;
        Ok(self.push(Matrix::from_raw(1, 1, vec![s]), Op::SumSquares(ia), g))
    }

    /// Reverse sweep from a scalar `loss`, returning the adjoint of every
    /// node that lies on a gradient path (None elsewhere).
    pub fn adjoints(&self, loss: Var) -> Result<Vec<Option<Matrix>>> {
        let root = self.idx(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        let mut adj: Vec<Option<Matrix>> = (0..=root).map(|_| None).collect();
        adj[root] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(adj)
    }

    /// Adds d(loss)/d(param) into the store's accumulators for every
    /// parameter bound on this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let adj = self.adjoints(loss)?;
        for (i, a) in adj.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[i].op, a) {
                let slot = store
                    .params
                    .get_mut(id.0)
                    .ok_or_else(|| Error::invalid(format!("unknown parameter {}", id.0)))?;
                if slot.grad.shape() != g.shape() {
                    return Err(Error::Shape {
                        op: "backward",
                        lhs: slot.grad.shape(),
                        rhs: g.shape(),
                    });
                }
                slot.grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].needs_grad;
        let acc = |adj: &mut [Option<Matrix>], p: usize, delta: Matrix| match &mut adj[p] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, 1.0, &mut da);
                    acc(adj, *a, da);
                }
                if wants(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, 1.0, &mut db);
                    acc(adj, *b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(adj, *a, g.clone());
                }
                if wants(*b) {
                    acc(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(adj, *a, g.clone());
                }
                if wants(*b) {
                    acc(adj, *b, g.map(|x| -x));
                }
            }
            Op::AddCol(a, c) => {
                if wants(*a) {
                    acc(adj, *a, g.clone());
                }
                if wants(*c) {
                    let sums = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    acc(adj, *c, Matrix::from_raw(g.rows(), 1, sums));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if wants(*a) {
                    acc(adj, *a, hadamard(g, bv));
                }
                if wants(*b) {
                    acc(adj, *b, hadamard(g, av));
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (&nodes[*a].value, nodes[*c].value.as_slice());
                if wants(*a) {
                    acc(adj, *a, Matrix::from_fn(g.rows(), g.cols(), |r, k| g.get(r, k) * cv[r]));
                }
                if wants(*c) {
                    let sums = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(adj, *c, Matrix::from_raw(g.rows(), 1, sums));
                }
            }
            Op::MulRow(a, rw) => {
                let (av, rv) = (&nodes[*a].value, nodes[*rw].value.as_slice());
                if wants(*a) {
                    acc(adj, *a, Matrix::from_fn(g.rows(), g.cols(), |r, k| g.get(r, k) * rv[k]));
                }
                if wants(*rw) {
                    let mut sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (k, s) in sums.iter_mut().enumerate() {
                            *s += g.get(r, k) * av.get(r, k);
                        }
                    }
                    acc(adj, *rw, Matrix::from_raw(1, g.cols(), sums));
                }
            }
            Op::MulConst(a, mask) => {
                if wants(*a) {
                    acc(adj, *a, hadamard(g, mask));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    acc(adj, *a, g.map(|x| x * s));
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    acc(adj, *a, zip_map(g, out, |d, y| d * y * (1.0 - y)));
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    acc(adj, *a, zip_map(g, out, |d, y| d * (1.0 - y * y)));
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    acc(adj, *a, zip_map(g, out, |d, y| if y > 0.0 { d } else { 0.0 }));
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = nodes[p].value.rows();
                    if wants(p) {
                        let slice = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        acc(adj, p, Matrix::from_raw(rows, cols, slice));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = nodes[p].value.cols();
                    if wants(p) {
                        let piece = Matrix::from_fn(g.rows(), cols, |r, k| g.get(r, offset + k));
                        acc(adj, p, piece);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                if wants(*a) {
                    let av = &nodes[*a].value;
                    let mut full = Matrix::zeros(av.rows(), av.cols());
                    let w = av.cols();
                    full.as_mut_slice()[start * w..start * w + g.len()].copy_from_slice(g.as_slice());
                    acc(adj, *a, full);
                }
            }
            Op::SliceCols(a, start) => {
                if wants(*a) {
                    let av = &nodes[*a].value;
                    let mut full = Matrix::zeros(av.rows(), av.cols());
                    let w = av.cols();
                    for r in 0..g.rows() {
                        full.as_mut_slice()[r * w + start..r * w + start + g.cols()]
                            .copy_from_slice(g.row(r));
                    }
                    acc(adj, *a, full);
                }
            }
            Op::SoftmaxCols(a) => {
                if wants(*a) {
                    let mut da = Matrix::zeros(out.rows(), out.cols());
                    for c in 0..out.cols() {
                        let dot: f64 = (0..out.rows()).map(|r| out.get(r, c) * g.get(r, c)).sum();
                        for r in 0..out.rows() {
                            da.as_mut_slice()[r * out.cols() + c] = out.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    acc(adj, *a, da);
                }
            }
            Op::SumSquares(a) => {
                if wants(*a) {
                    let s = 2.0 * g.get(0, 0);
                    acc(adj, *a, nodes[*a].value.map(|x| s * x));
                }
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_raw(
        a.rows(),
        a.cols(),
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}
