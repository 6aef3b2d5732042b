//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Nodes are appended to a [`Graph`] as operations are applied, so node ids are
//! already a topological order. [`Graph::backward`] walks that order in reverse
//! once, accumulating `∂loss/∂node` into every node that requires a gradient.
//!
//! Binary elementwise operations broadcast a `1×C` row vector, an `R×1` column
//! vector, or a `1×1` scalar against an `R×C` operand. Nothing more general is
//! supported.
//!
//! ```
//! use chrep::{Graph, Tensor2};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor2::scalar(3.0));
//! let y = g.square(x).unwrap();
//! let loss = g.sum(y).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::numkernel::tensor::Tensor2;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div { num: NodeId, den: NodeId, eps: T },
    Scale(NodeId, T),
    Relu(NodeId),
    Exp(NodeId),
    Log { x: NodeId, eps: T },
    Sqrt(NodeId),
    Square(NodeId),
    Abs(NodeId),
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    RowL2Normalize { x: NodeId, eps: T },
    Transpose(NodeId),
    ConcatCols(NodeId, NodeId),
    SelectCols(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    SumPerRow(NodeId),
    MeanPerRow(NodeId),
    SumPerCol(NodeId),
    MeanPerCol(NodeId),
}

struct Node<T> {
    value: Tensor2<T>,
    grad: Option<Tensor2<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation graph owning every intermediate value and gradient.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape of a broadcasting binary op, if the shapes are compatible.
fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    fn dim(x: usize, y: usize) -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    }
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor2<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor2<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> NodeId {
        self.constant(Tensor2::scalar(value))
    }

    fn push_leaf(&mut self, value: Tensor2<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Gradient accumulated by the last [`Graph::backward`]; `None` for nodes that
    /// do not require a gradient or were not reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor2<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, name: &str, op: Op<T>, value: Tensor2<T>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                op: name.to_string(),
            });
        }
        let requires_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<NodeId> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => {
                vec![a, b]
            }
            Op::Div { num, den, .. } => vec![num, den],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Exp(x)
            | Op::Log { x, .. }
            | Op::Sqrt(x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::RowSoftmax(x)
            | Op::RowLogSoftmax(x)
            | Op::RowL2Normalize { x, .. }
            | Op::Transpose(x)
            | Op::SelectCols(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumPerRow(x)
            | Op::MeanPerRow(x)
            | Op::SumPerCol(x)
            | Op::MeanPerCol(x) => vec![x],
        }
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), v)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor2<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let (rows, cols) = broadcast_shape(sa, sb)
            .ok_or_else(|| Error::shape(name, format!("{sa:?} vs {sb:?}")))?;
        if sa == sb {
            return Ok(va.zip_map(vb, f));
        }
        let mut out = Tensor2::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = va.data()[bidx(sa, r, c)];
                let y = vb.data()[bidx(sb, r, c)];
                out.set(r, c, f(x, y));
            }
        }
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", Op::Mul(a, b), v)
    }

    /// `num / (den + eps)`, broadcasting.
    pub fn div_eps(&mut self, num: NodeId, den: NodeId, eps: T) -> Result<NodeId> {
        let v = self.broadcast_binary("div", num, den, |x, y| x / (y + eps))?;
        self.push("div", Op::Div { num, den, eps }, v)
    }

    pub fn div(&mut self, num: NodeId, den: NodeId) -> Result<NodeId> {
        self.div_eps(num, den, T::zero())
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * c);
        self.push("scale", Op::Scale(x, c), v)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.scale(x, -T::one())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", Op::Relu(x), v)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(T::exp);
        self.push("exp", Op::Exp(x), v)
    }

    /// `ln(x + eps)`.
    pub fn log_eps(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let v = self.value(x).map(|v| (v + eps).ln());
        self.push("log", Op::Log { x, eps }, v)
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(T::sqrt);
        self.push("sqrt", Op::Sqrt(x), v)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(|v| v * v);
        self.push("square", Op::Square(x), v)
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).map(T::abs);
        self.push("abs", Op::Abs(x), v)
    }

    /// Softmax along each row, max-subtracted.
    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = row_softmax_value(self.value(x));
        self.push("row_softmax", Op::RowSoftmax(x), v)
    }

    /// `log(row_softmax(x))` computed as `x − logsumexp(x)` per row.
    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("row_log_softmax", Op::RowLogSoftmax(x), out)
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let n = row_norm(row).max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push("row_l2_normalize", Op::RowL2Normalize { x, eps }, out)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose();
        self.push("transpose", Op::Transpose(x), v)
    }

    /// `[a | b]`.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = Tensor2::zeros(va.rows(), va.cols() + vb.cols());
        for r in 0..va.rows() {
            let row = out.row_mut(r);
            row[..va.cols()].copy_from_slice(va.row(r));
            row[va.cols()..].copy_from_slice(vb.row(r));
        }
        self.push("concat_cols", Op::ConcatCols(a, b), out)
    }

    pub fn select_cols(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&c| c >= xv.cols()) {
            return Err(Error::shape(
                "select_cols",
                format!("column {bad} of a {:?} tensor", xv.shape()),
            ));
        }
        let v = xv.select_cols(idx);
        self.push("select_cols", Op::SelectCols(x, idx.to_vec()), v)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor2::scalar(self.value(x).sum());
        self.push("sum", Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor2::scalar(xv.sum() / T::lit(xv.len() as f64));
        self.push("mean", Op::Mean(x), v)
    }

    /// Row sums as an `R×1` column.
    pub fn sum_per_row(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let data = (0..xv.rows()).map(|r| xv.row(r).iter().copied().sum()).collect();
        let v = Tensor2::from_vec(xv.rows(), 1, data)?;
        self.push("sum_per_row", Op::SumPerRow(x), v)
    }

    pub fn mean_per_row(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let n = T::lit(xv.cols() as f64);
        let data = (0..xv.rows())
            .map(|r| xv.row(r).iter().copied().sum::<T>() / n)
            .collect();
        let v = Tensor2::from_vec(xv.rows(), 1, data)?;
        self.push("mean_per_row", Op::MeanPerRow(x), v)
    }

    /// Column sums as a `1×C` row.
    pub fn sum_per_col(&mut self, x: NodeId) -> Result<NodeId> {
        let v = col_sums(self.value(x));
        self.push("sum_per_col", Op::SumPerCol(x), v)
    }

    pub fn mean_per_col(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let n = T::lit(xv.rows() as f64);
        let v = col_sums(xv).map(|s| s / n);
        self.push("mean_per_col", Op::MeanPerCol(x), v)
    }

    // ---- reverse pass ----

    /// Clears accumulated gradients so the graph can be differentiated again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Accumulates `∂loss/∂node` into every node that requires a gradient.
    ///
    /// A second call without [`Graph::reset_grads`] is rejected, since it would
    /// double the accumulated gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; reset_grads first".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Tensor2::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor2<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.add_assign(&delta),
            None => node.grad = Some(delta),
        }
    }

    /// Sums an output-shaped gradient down to a broadcast operand's shape.
    fn reduce_to(shape: (usize, usize), g: &Tensor2<T>, f: impl Fn(usize, usize, T) -> T) -> Tensor2<T> {
        let mut out = Tensor2::zeros(shape.0, shape.1);
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                out.data_mut()[bidx(shape, r, c)] += f(r, c, g.get(r, c));
            }
        }
        out
    }

    fn propagate(&mut self, i: usize, op: &Op<T>, g: &Tensor2<T>) -> Result<()> {
        let out_shape = g.shape();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(a) {
                    let da = g.matmul_nt(self.value(b))?;
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = self.value(a).matmul_tn(g)?;
                    self.accumulate(b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                let (sa, sb) = (self.shape(a), self.shape(b));
                if self.requires_grad(a) {
                    let da = if sa == out_shape { g.clone() } else { Self::reduce_to(sa, g, |_, _, v| v) };
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let db = Self::reduce_to(sb, g, |_, _, v| v * sign);
                    self.accumulate(b, db);
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                if self.requires_grad(a) {
                    let vb = self.value(b);
                    let da = Self::reduce_to(sa, g, |r, c, v| v * vb.data()[bidx(sb, r, c)]);
                    self.accumulate(a, da);
                }
                if self.requires_grad(b) {
                    let va = self.value(a);
                    let db = Self::reduce_to(sb, g, |r, c, v| v * va.data()[bidx(sa, r, c)]);
                    self.accumulate(b, db);
                }
            }
            Op::Div { num, den, eps } => {
                let (sa, sb) = (self.shape(num), self.shape(den));
                if self.requires_grad(num) {
                    let vb = self.value(den);
                    let da = Self::reduce_to(sa, g, |r, c, v| v / (vb.data()[bidx(sb, r, c)] + eps));
                    self.accumulate(num, da);
                }
                if self.requires_grad(den) {
                    let (va, vb) = (self.value(num), self.value(den));
                    let db = Self::reduce_to(sb, g, |r, c, v| {
                        let d = vb.data()[bidx(sb, r, c)] + eps;
                        -v * va.data()[bidx(sa, r, c)] / (d * d)
                    });
                    self.accumulate(den, db);
                }
            }
            Op::Scale(x, c) => {
                let dx = g.map(|v| v * c);
                self.accumulate(x, dx);
            }
            Op::Relu(x) => {
                let dx = g.zip_map(self.value(x), |v, xv| if xv > T::zero() { v } else { T::zero() });
                self.accumulate(x, dx);
            }
            Op::Exp(x) => {
                let dx = g.zip_map(&self.nodes[i].value, |v, y| v * y);
                self.accumulate(x, dx);
            }
            Op::Log { x, eps } => {
                let dx = g.zip_map(self.value(x), |v, xv| v / (xv + eps));
                self.accumulate(x, dx);
            }
            Op::Sqrt(x) => {
                let two = T::lit(2.0);
                let dx = g.zip_map(&self.nodes[i].value, |v, y| {
                    if y > T::zero() {
                        v / (two * y)
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(x, dx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let dx = g.zip_map(self.value(x), |v, xv| two * xv * v);
                self.accumulate(x, dx);
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(x), |v, xv| {
                    if xv > T::zero() {
                        v
                    } else if xv < T::zero() {
                        -v
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(x, dx);
            }
            Op::RowSoftmax(x) => {
                let y = &self.nodes[i].value;
                let mut dx = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (d, (&yy, &gg)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = yy * (gg - dot);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::RowLogSoftmax(x) => {
                let y = &self.nodes[i].value;
                let mut dx = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let gsum: T = gr.iter().copied().sum();
                    for (d, (&yy, &gg)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = gg - yy.exp() * gsum;
                    }
                }
                self.accumulate(x, dx);
            }
            Op::RowL2Normalize { x, eps } => {
                let xv = self.value(x);
                let y = &self.nodes[i].value;
                let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let n = row_norm(xv.row(r));
                    let (yr, gr) = (y.row(r), g.row(r));
                    let out = dx.row_mut(r);
                    if n > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (d, (&yy, &gg)) in out.iter_mut().zip(yr.iter().zip(gr)) {
                            *d = (gg - yy * dot) / n;
                        }
                    } else {
                        for (d, &gg) in out.iter_mut().zip(gr) {
                            *d = gg / eps;
                        }
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Transpose(x) => {
                self.accumulate(x, g.transpose());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                let cb = self.shape(b).1;
                let idx_a: Vec<usize> = (0..ca).collect();
                let idx_b: Vec<usize> = (ca..ca + cb).collect();
                if self.requires_grad(a) {
                    self.accumulate(a, g.select_cols(&idx_a));
                }
                if self.requires_grad(b) {
                    self.accumulate(b, g.select_cols(&idx_b));
                }
            }
            Op::SelectCols(x, ref idx) => {
                let (rows, cols) = self.shape(x);
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    for (k, &c) in idx.iter().enumerate() {
                        let v = dx.get(r, c) + g.get(r, k);
                        dx.set(r, c, v);
                    }
                }
                self.accumulate(x, dx);
            }
            Op::Sum(x) | Op::Mean(x) => {
                let (rows, cols) = self.shape(x);
                let mut v = g.item();
                if matches!(op, Op::Mean(_)) {
                    v /= T::lit((rows * cols) as f64);
                }
                self.accumulate(x, Tensor2::filled(rows, cols, v));
            }
            Op::SumPerRow(x) | Op::MeanPerRow(x) => {
                let (rows, cols) = self.shape(x);
                let scale = if matches!(op, Op::MeanPerRow(_)) {
                    T::one() / T::lit(cols as f64)
                } else {
                    T::one()
                };
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    let v = g.get(r, 0) * scale;
                    dx.row_mut(r).iter_mut().for_each(|d| *d = v);
                }
                self.accumulate(x, dx);
            }
            Op::SumPerCol(x) | Op::MeanPerCol(x) => {
                let (rows, cols) = self.shape(x);
                let scale = if matches!(op, Op::MeanPerCol(_)) {
                    T::one() / T::lit(rows as f64)
                } else {
                    T::one()
                };
                let mut dx = Tensor2::zeros(rows, cols);
                for r in 0..rows {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *d = gv * scale;
                    }
                }
                self.accumulate(x, dx);
            }
        }
        Ok(())
    }
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn col_sums<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    let mut out = Tensor2::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

/// Row softmax on plain values, max-subtracted.
pub fn row_softmax_value<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s: T = row.iter().copied().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::gradcheck::check_gradient;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor2<f64> {
        Tensor2::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[0.0, 0.0]));
        let y = g.row_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 2, &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[3.0]));
        let y = g.square(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        let fd = ((3.0f64 + 1e-4).powi(2) - (3.0f64 - 1e-4).powi(2)) / 2e-4;
        assert!((fd - 6.0).abs() < 1e-8);
    }

    #[test]
    fn backward_twice_is_rejected_until_reset() {
        let mut g = Graph::new();
        let x = g.param(t(1, 1, &[1.0]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract(_))));
        g.reset_grads();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(1, 2, &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_loss_gives_no_gradient() {
        let mut g = Graph::new();
        let w = g.param(t(1, 2, &[1.0, 2.0]));
        let c = g.constant(t(1, 1, &[4.0]));
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn linear_loss_gradient_independent_of_weights() {
        let grad_at = |wv: &[f64]| {
            let mut g = Graph::new();
            let w = g.param(t(2, 2, wv));
            let x = g.constant(t(2, 1, &[1.0, -2.0]));
            let y = g.matmul(w, x).unwrap();
            let l = g.mean(y).unwrap();
            g.backward(l).unwrap();
            g.grad(w).unwrap().clone()
        };
        assert_eq!(grad_at(&[1.0, 2.0, 3.0, 4.0]), grad_at(&[-5.0, 0.5, 9.0, 0.0]));
    }

    #[test]
    fn non_finite_results_name_the_op() {
        let mut g = Graph::new();
        let x = g.constant(t(1, 1, &[-1.0]));
        let err = g.log_eps(x, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref op } if op == "log"));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor2::zeros(2, 3));
        let b = g.constant(Tensor2::zeros(3, 2));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(g.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn abs_has_zero_subgradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(t(1, 3, &[-2.0, 0.0, 5.0]));
        let y = g.abs(x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    type Unary = fn(&mut Graph<f64>, NodeId) -> Result<NodeId>;

    /// Every unary op composed with a fixed random projection to get a scalar.
    fn check_unary(name: &str, op: Unary, positive: bool) {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut theta = random(&mut rng, 3, 4);
            if positive {
                theta.iter_mut().for_each(|v| *v = v.abs() + 0.1);
            }
            let probe = random(&mut rng, 3, 4);
            let err = check_gradient(
                |g: &mut Graph<f64>, th: &[f64]| {
                    let x = g.param(t(3, 4, th));
                    let y = op(g, x)?;
                    let shape = g.shape(y);
                    let p = g.constant(Tensor2::from_vec(shape.0, shape.1, probe[..shape.0 * shape.1].to_vec())?);
                    let z = g.mul(y, p)?;
                    Ok((g.sum(z)?, vec![x]))
                },
                &theta,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary("relu", |g, x| g.relu(x), false);
        check_unary("exp", |g, x| g.exp(x), false);
        check_unary("log", |g, x| g.log_eps(x, 1e-8), true);
        check_unary("sqrt", |g, x| g.sqrt(x), true);
        check_unary("square", |g, x| g.square(x), false);
        check_unary("abs", |g, x| g.abs(x), false);
        check_unary("scale", |g, x| g.scale(x, -1.7), false);
        check_unary("row_softmax", |g, x| g.row_softmax(x), false);
        check_unary("row_log_softmax", |g, x| g.row_log_softmax(x), false);
        check_unary("row_l2_normalize", |g, x| g.row_l2_normalize(x, 1e-8), false);
        check_unary("transpose", |g, x| g.transpose(x), false);
        check_unary("select_cols", |g, x| g.select_cols(x, &[3, 0, 0]), false);
        check_unary("sum", |g, x| g.sum(x), false);
        check_unary("mean", |g, x| g.mean(x), false);
        check_unary("sum_per_row", |g, x| g.sum_per_row(x), false);
        check_unary("mean_per_row", |g, x| g.mean_per_row(x), false);
        check_unary("sum_per_col", |g, x| g.sum_per_col(x), false);
        check_unary("mean_per_col", |g, x| g.mean_per_col(x), false);
    }

    type Binary = fn(&mut Graph<f64>, NodeId, NodeId) -> Result<NodeId>;

    fn check_binary(name: &str, op: Binary, sa: (usize, usize), sb: (usize, usize), positive_b: bool) {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let na = sa.0 * sa.1;
            let mut theta = random(&mut rng, 1, na + sb.0 * sb.1);
            if positive_b {
                theta[na..].iter_mut().for_each(|v| *v = v.abs() + 0.5);
            }
            let probe = random(&mut rng, 8, 8);
            let err = check_gradient(
                |g: &mut Graph<f64>, th: &[f64]| {
                    let a = g.param(t(sa.0, sa.1, &th[..na]));
                    let b = g.param(t(sb.0, sb.1, &th[na..]));
                    let y = op(g, a, b)?;
                    let (r, c) = g.shape(y);
                    let p = g.constant(Tensor2::from_vec(r, c, probe[..r * c].to_vec())?);
                    let z = g.mul(y, p)?;
                    Ok((g.sum(z)?, vec![a, b]))
                },
                &theta,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-6, "{name} {sa:?} {sb:?} seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let shapes = [((3, 4), (3, 4)), ((3, 4), (1, 4)), ((3, 4), (3, 1)), ((3, 4), (1, 1)), ((1, 4), (3, 4))];
        for (sa, sb) in shapes {
            check_binary("add", |g, a, b| g.add(a, b), sa, sb, false);
            check_binary("sub", |g, a, b| g.sub(a, b), sa, sb, false);
            check_binary("mul", |g, a, b| g.mul(a, b), sa, sb, false);
            check_binary("div", |g, a, b| g.div_eps(a, b, 1e-8), sa, sb, true);
        }
        check_binary("matmul", |g, a, b| g.matmul(a, b), (3, 4), (4, 2), false);
        check_binary("concat_cols", |g, a, b| g.concat_cols(a, b), (3, 4), (3, 2), false);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(t(3, 4, &v));
            let y = g.row_softmax(x).unwrap();
            for r in 0..3 {
                let s: f64 = g.value(y).row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_rows_have_unit_norm(v in prop::collection::vec(-5.0f64..5.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(t(3, 4, &v));
            let y = g.row_l2_normalize(x, 1e-8).unwrap();
            for r in 0..3 {
                if row_norm(&v[r * 4..r * 4 + 4]) > 1e-8 {
                    prop_assert!((row_norm(g.value(y).row(r)) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut g = Graph::new();
            let w = g.param(t(2, 3, &[0.3, -1.2, 0.7, 1.1, 0.05, -0.4]));
            let x = g.constant(t(3, 2, &[1.0, 0.5, -0.25, 2.0, 0.0, 1.5]));
            let y = g.matmul(w, x).unwrap();
            let s = g.row_softmax(y).unwrap();
            let l = g.log_eps(s, 1e-8).unwrap();
            let m = g.mean(l).unwrap();
            g.backward(m).unwrap();
            (g.value(m).item().to_bits(), g.grad(w).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
