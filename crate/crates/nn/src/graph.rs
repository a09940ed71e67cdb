//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! Every operation appends a node holding its value and the ids of its
//! inputs. Nodes are created in topological order, so the backward pass
//! walks the tape once from the end. Gradients are only materialized for
//! nodes that depend on a parameter leaf.

use crate::tensor::{gemm, Tensor};
use crate::{NnError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Square(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SegmentSum(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SelectCols(Var, Vec<usize>),
    SliceRows(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape. Consumed by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    kinks: Option<u64>,
}

/// Gradients of a scalar loss, indexed by the [`Var`]s of the graph that
/// produced them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not depend on any parameter
    /// or the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that fingerprints the sign pattern of every ReLU input, used
    /// to detect finite-difference stencils that straddle a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            nodes: Vec::new(),
            kinks: Some(0xcbf2_9ce4_8422_2325),
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
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

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `x + bias` with a `[1, n]` bias broadcast over the rows of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2()?;
        if tb.dims2()? != (1, n) {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, sign: f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + sign * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        let node_op = if sign > 0.0 { Op::Add(a, b) } else { Op::Sub(a, b) };
        Ok(self.push(out, node_op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        if let Some(h) = self.kinks.as_mut() {
            for v in tx.data() {
                *h ^= u64::from(*v > 0.0);
                *h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * v).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// Sum of all entries as a `[1, 1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean of all entries; the mean of an empty tensor is 0.
    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = tx.numel();
        let total: f64 = tx.data().iter().sum();
        let mean = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(mean), Op::Mean(x), rg)
    }

    /// Sums consecutive row blocks: output row `g` is the sum of rows
    /// `offsets[g]..offsets[g + 1]`, accumulated in row order. Empty
    /// blocks give zero rows.
    pub fn segment_sum(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        let valid = !offsets.is_empty()
            && offsets[0] == 0
            && offsets.last() == Some(&rows)
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if !valid {
            return Err(NnError::Shape {
                op: "segment_sum",
                left: tx.shape().to_vec(),
                right: offsets,
            });
        }
        let groups = offsets.len() - 1;
        let mut out = vec![0.0; groups * cols];
        for g in 0..groups {
            let acc = &mut out[g * cols..(g + 1) * cols];
            for r in offsets[g]..offsets[g + 1] {
                for (a, v) in acc.iter_mut().zip(tx.row(r)) {
                    *a += v;
                }
            }
        }
        let out = Tensor::matrix(groups, cols, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentSum(x, offsets), rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        if index.iter().any(|&i| i >= rows) {
            return Err(NnError::Shape {
                op: "gather_rows",
                left: tx.shape().to_vec(),
                right: index,
            });
        }
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in &index {
            out.extend_from_slice(tx.row(i));
        }
        let out = Tensor::matrix(index.len(), cols, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, index), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = ta.dims2()?;
        let (rb, cb) = tb.dims2()?;
        if ra != rb {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(r));
        }
        let out = Tensor::matrix(ra, ca + cb, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Picks column `index[r]` from each row `r`, giving `[rows, 1]`.
    pub fn select_cols(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        if index.len() != rows || index.iter().any(|&c| c >= cols) {
            return Err(NnError::Shape {
                op: "select_cols",
                left: tx.shape().to_vec(),
                right: index,
            });
        }
        let out = index.iter().enumerate().map(|(r, &c)| tx.get(r, c)).collect();
        let out = Tensor::matrix(rows, 1, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectCols(x, index), rg))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2()?;
        if start > end || end > rows {
            return Err(NnError::Shape {
                op: "slice_rows",
                left: tx.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let out = Tensor::matrix(end - start, cols, tx.data()[start * cols..end * cols].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let Graph { nodes, .. } = self;
        let lt = &nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(NnError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.data()[0].is_finite() {
            return Err(NnError::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::new(lt.shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(up) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            let needs = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(up);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let n = val(*b).cols();
                    if needs(*a) {
                        let g = grad_slot(&mut grads, *a, val(*a));
                        gemm(m, n, k, up.data(), false, val(*b).data(), true, 1.0, g.data_mut());
                    }
                    if needs(*b) {
                        let g = grad_slot(&mut grads, *b, val(*b));
                        gemm(k, m, n, val(*a).data(), true, up.data(), false, 1.0, g.data_mut());
                    }
                }
                Op::AddBias(x, b) => {
                    if needs(*b) {
                        let cols = up.cols();
                        let g = grad_slot(&mut grads, *b, val(*b));
                        for row in up.data().chunks_exact(cols.max(1)) {
                            for (gb, u) in g.data_mut().iter_mut().zip(row) {
                                *gb += u;
                            }
                        }
                    }
                    if needs(*x) {
                        accumulate(&mut grads, *x, val(*x), up.data().iter().copied());
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if needs(*b) {
                        accumulate(&mut grads, *b, val(*b), up.data().iter().map(|u| sign * u));
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, val(*a), up.data().iter().copied());
                    }
                }
                Op::Relu(x) => {
                    let it = up
                        .data()
                        .iter()
                        .zip(val(*x).data())
                        .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 });
                    accumulate(&mut grads, *x, val(*x), it);
                }
                Op::Square(x) => {
                    let it = up.data().iter().zip(val(*x).data()).map(|(u, v)| 2.0 * v * u);
                    accumulate(&mut grads, *x, val(*x), it);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, val(*x), up.data().iter().map(|u| s * u));
                }
                Op::Sum(x) => {
                    let u = up.data()[0];
                    let n = val(*x).numel();
                    accumulate(&mut grads, *x, val(*x), std::iter::repeat_n(u, n));
                }
                Op::Mean(x) => {
                    let n = val(*x).numel();
                    let u = up.data()[0] / n.max(1) as f64;
                    accumulate(&mut grads, *x, val(*x), std::iter::repeat_n(u, n));
                }
                Op::SegmentSum(x, offsets) => {
                    let cols = up.cols();
                    let g = grad_slot(&mut grads, *x, val(*x));
                    for (gi, w) in offsets.windows(2).enumerate() {
                        let src = up.row(gi);
                        for r in w[0]..w[1] {
                            for (d, s) in g.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::GatherRows(x, index) => {
                    let cols = up.cols();
                    let g = grad_slot(&mut grads, *x, val(*x));
                    for (r, &src) in index.iter().enumerate() {
                        for (d, s) in g.data_mut()[src * cols..(src + 1) * cols].iter_mut().zip(up.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    if needs(*a) {
                        let it = up.data().chunks_exact(ca + cb).flat_map(|r| r[..ca].iter().copied());
                        accumulate(&mut grads, *a, val(*a), it);
                    }
                    if needs(*b) {
                        let it = up.data().chunks_exact(ca + cb).flat_map(|r| r[ca..].iter().copied());
                        accumulate(&mut grads, *b, val(*b), it);
                    }
                }
                Op::SelectCols(x, index) => {
                    let cols = val(*x).cols();
                    let g = grad_slot(&mut grads, *x, val(*x));
                    for (r, &c) in index.iter().enumerate() {
                        g.data_mut()[r * cols + c] += up.data()[r];
                    }
                }
                Op::SliceRows(x, start) => {
                    let cols = val(*x).cols();
                    let g = grad_slot(&mut grads, *x, val(*x));
                    let off = start * cols;
                    for (d, s) in g.data_mut()[off..off + up.numel()].iter_mut().zip(up.data()) {
                        *d += s;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape().to_vec()))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, like: &Tensor, it: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (d, s) in g.data_mut().iter_mut().zip(it) {
                *d += s;
            }
        }
        slot @ None => {
            let data: Vec<f64> = it.collect();
            *slot = Some(Tensor::new(like.shape().to_vec(), data).expect("gradient shape"));
        }
    }
}
