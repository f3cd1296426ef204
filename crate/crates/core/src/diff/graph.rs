use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Primitive operations. `GeluD1` and `TanhD1` are first derivatives that are
/// themselves differentiable, which lets an encoder Jacobian be built inside
/// the graph and penalized with a single backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Leaf,
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Sub,
    Scale(f64),
    Hadamard,
    Gelu,
    GeluD1,
    Tanh,
    TanhD1,
    Exp,
    Log,
    Square,
    Abs,
    Sum,
    LogSumExpRows,
    Concat(Axis),
    Slice { axis: Axis, start: usize, len: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::Hadamard => "hadamard",
            Op::Gelu => "gelu",
            Op::GeluD1 => "gelu_d1",
            Op::Tanh => "tanh",
            Op::TanhD1 => "tanh_d1",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Sum => "sum",
            Op::LogSumExpRows => "logsumexp_rows",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

#[inline]
pub fn gelu_d1(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

#[inline]
pub fn gelu_d2(x: f64) -> f64 {
    std_normal_pdf(x) * (2.0 - x * x)
}

#[inline]
pub fn tanh_d1(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation graph. Node ids are assigned in insertion order,
/// so parents always precede children and reverse insertion order is a valid
/// topological order for the backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// `(Φ(x), φ(x))` of inputs to the GELU ops, shared by the forward and
    /// backward rules of `Gelu` and `GeluD1` on the same pre-activation.
    normal: HashMap<usize, (Vec<f64>, Vec<f64>)>,
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf; gradients flow to it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// Registers a constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> Op {
        self.nodes[id.0].op
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].parents
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, parents, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and appends the result.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        for &p in inputs {
            if p.0 >= self.nodes.len() {
                return Err(DiffError::UnknownNode(p.0));
            }
        }
        if matches!(op, Op::Gelu | Op::GeluD1) && inputs.len() == 1 {
            let x = &self.nodes[inputs[0].0].value;
            self.normal.entry(inputs[0].0).or_insert_with(|| {
                x.data().iter().map(|&v| (std_normal_cdf(v), std_normal_pdf(v))).unzip()
            });
        }
        let value = self.forward(op, inputs)?;
        if !value.is_finite() {
            return Err(DiffError::NonFinite(op.name()));
        }
        let requires_grad = inputs.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), value, requires_grad))
    }

    fn arity(op: Op, inputs: &[NodeId]) -> Result<(), DiffError> {
        let want = match op {
            Op::Leaf => 0,
            Op::MatMul { .. } | Op::Add | Op::Sub | Op::Hadamard => 2,
            Op::Concat(_) => {
                return if inputs.is_empty() {
                    Err(DiffError::Arity { op: op.name(), want: 1, got: 0 })
                } else {
                    Ok(())
                }
            }
            _ => 1,
        };
        if inputs.len() != want {
            return Err(DiffError::Arity { op: op.name(), want, got: inputs.len() });
        }
        Ok(())
    }

    fn forward(&self, op: Op, inputs: &[NodeId]) -> Result<Tensor, DiffError> {
        Self::arity(op, inputs)?;
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let shape_err = |msg: String| Err(DiffError::Shape(format!("{}: {msg}", op.name())));
        let out = match op {
            Op::Leaf => return Err(DiffError::Shape("leaf has no forward rule".into())),
            Op::MatMul { trans_a, trans_b } => {
                let (a, b) = (v(0), v(1));
                let (m, ka) = if trans_a { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
                let (kb, n) = if trans_b { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
                if ka != kb {
                    return shape_err(format!("{:?} by {:?}", a.shape(), b.shape()));
                }
                let mut out = Tensor::zeros(m, n);
                gemm(a, trans_a, b, trans_b, 0.0, &mut out);
                out
            }
            Op::Add | Op::Sub | Op::Hadamard => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return shape_err(format!("{:?} vs {:?}", a.shape(), b.shape()));
                }
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.rows(), a.cols(), data)?
            }
            Op::Scale(s) => v(0).map(|x| s * x),
            Op::Gelu | Op::GeluD1 => {
                let x = v(0);
                let (cdf, pdf) = &self.normal[&inputs[0].0];
                let data = if op == Op::Gelu {
                    x.data().iter().zip(cdf).map(|(v, c)| v * c).collect()
                } else {
                    x.data().iter().zip(cdf).zip(pdf).map(|((v, c), p)| c + v * p).collect()
                };
                Tensor::new(x.rows(), x.cols(), data)?
            }
            Op::Tanh => v(0).map(f64::tanh),
            Op::TanhD1 => v(0).map(tanh_d1),
            Op::Exp => v(0).map(f64::exp),
            Op::Log => v(0).map(f64::ln),
            Op::Square => v(0).map(|x| x * x),
            Op::Abs => v(0).map(f64::abs),
            Op::Sum => Tensor::scalar(v(0).data().iter().sum()),
            Op::LogSumExpRows => {
                let a = v(0);
                if a.cols() == 0 {
                    return shape_err("empty rows".into());
                }
                let data = (0..a.rows()).map(|r| logsumexp(a.row(r))).collect();
                Tensor::new(a.rows(), 1, data)?
            }
            Op::Concat(axis) => {
                let parts: Vec<&Tensor> = (0..inputs.len()).map(v).collect();
                concat(&parts, axis)?
            }
            Op::Slice { axis, start, len } => {
                let a = v(0);
                match axis {
                    Axis::Rows => {
                        if start + len > a.rows() {
                            return shape_err(format!("rows {start}..{} of {}", start + len, a.rows()));
                        }
                        let data = a.data()[start * a.cols()..(start + len) * a.cols()].to_vec();
                        Tensor::new(len, a.cols(), data)?
                    }
                    Axis::Cols => {
                        if start + len > a.cols() {
                            return shape_err(format!("cols {start}..{} of {}", start + len, a.cols()));
                        }
                        a.slice_cols(start, len)
                    }
                }
            }
        };
        Ok(out)
    }

    /// Reverse-mode sweep from a `1×1` root. Returns gradients for every node
    /// that depends on a parameter leaf.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, DiffError> {
        let root_value = &self.nodes.get(root.0).ok_or(DiffError::UnknownNode(root.0))?.value;
        if root_value.shape() != [1, 1] {
            return Err(DiffError::NotScalar(root_value.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let p = &node.parents;
        let val = |i: usize| &self.nodes[p[i].0].value;
        let wants = |i: usize| self.nodes[p[i].0].requires_grad;

        match node.op {
            Op::Leaf => {}
            Op::MatMul { trans_a, trans_b } => {
                let (a, b) = (val(0), val(1));
                if wants(0) {
                    // grad of op(A) is g·op(B)ᵀ; transpose back when A entered transposed.
                    let slot = grad_slot(grads, p[0], a.rows(), a.cols());
                    if trans_a {
                        gemm(b, trans_b, g, true, 1.0, slot);
                    } else {
                        gemm(g, false, b, !trans_b, 1.0, slot);
                    }
                }
                if wants(1) {
                    let slot = grad_slot(grads, p[1], b.rows(), b.cols());
                    if trans_b {
                        gemm(g, true, a, trans_a, 1.0, slot);
                    } else {
                        gemm(a, !trans_a, g, false, 1.0, slot);
                    }
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if wants(i) {
                        accumulate(grads, p[i], val(i), g.data().iter().copied());
                    }
                }
            }
            Op::Sub => {
                if wants(0) {
                    accumulate(grads, p[0], val(0), g.data().iter().copied());
                }
                if wants(1) {
                    accumulate(grads, p[1], val(1), g.data().iter().map(|x| -x));
                }
            }
            Op::Scale(s) => accumulate(grads, p[0], val(0), g.data().iter().map(|x| s * x)),
            Op::Hadamard => {
                let (a, b) = (val(0), val(1));
                if wants(0) {
                    accumulate(grads, p[0], a, g.data().iter().zip(b.data()).map(|(x, y)| x * y));
                }
                if wants(1) {
                    accumulate(grads, p[1], b, g.data().iter().zip(a.data()).map(|(x, y)| x * y));
                }
            }
            Op::Gelu | Op::GeluD1 => {
                let x = val(0);
                let (cdf, pdf) = &self.normal[&p[0].0];
                let it = g.data().iter().zip(x.data()).zip(cdf.iter().zip(pdf));
                if node.op == Op::Gelu {
                    accumulate(grads, p[0], x, it.map(|((g, v), (c, p))| g * (c + v * p)));
                } else {
                    accumulate(grads, p[0], x, it.map(|((g, v), (_, p))| g * p * (2.0 - v * v)));
                }
            }
            Op::Tanh => {
                let out = &node.value;
                accumulate(grads, p[0], val(0), g.data().iter().zip(out.data()).map(|(x, t)| x * (1.0 - t * t)));
            }
            Op::TanhD1 => unary(grads, p[0], g, val(0), |x| {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }),
            Op::Exp => {
                let out = &node.value;
                accumulate(grads, p[0], val(0), g.data().iter().zip(out.data()).map(|(x, e)| x * e));
            }
            Op::Log => unary(grads, p[0], g, val(0), |x| 1.0 / x),
            Op::Square => unary(grads, p[0], g, val(0), |x| 2.0 * x),
            Op::Abs => unary(grads, p[0], g, val(0), f64::signum),
            Op::Sum => {
                let s = g.item();
                accumulate(grads, p[0], val(0), std::iter::repeat_n(s, val(0).len()));
            }
            Op::LogSumExpRows => {
                let a = val(0);
                let out = &node.value;
                let cols = a.cols();
                let it = a.data().iter().enumerate().map(|(k, &x)| {
                    let r = k / cols;
                    g.data()[r] * (x - out.data()[r]).exp()
                });
                accumulate(grads, p[0], a, it);
            }
            Op::Concat(axis) => {
                let mut offset = 0;
                for (i, &pid) in p.iter().enumerate() {
                    let part = val(i);
                    let (rows, cols) = (part.rows(), part.cols());
                    if wants(i) {
                        let piece = match axis {
                            Axis::Rows => g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec(),
                            Axis::Cols => g.slice_cols(offset, cols).into_data(),
                        };
                        accumulate(grads, pid, part, piece.into_iter());
                    }
                    offset += match axis {
                        Axis::Rows => rows,
                        Axis::Cols => cols,
                    };
                }
            }
            Op::Slice { axis, start, .. } => {
                let a = val(0);
                let slot = grad_slot(grads, p[0], a.rows(), a.cols());
                match axis {
                    Axis::Rows => {
                        let off = start * a.cols();
                        for (d, s) in slot.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                    Axis::Cols => {
                        for r in 0..g.rows() {
                            for c in 0..g.cols() {
                                let v = slot.get(r, start + c) + g.get(r, c);
                                slot.set(r, start + c, v);
                            }
                        }
                    }
                }
            }
        }
    }

    // Convenience builders.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    /// `a·bᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::MatMul { trans_a: false, trans_b: true }, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Hadamard, &[a, b])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn gelu_d1(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::GeluD1, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Tanh, &[a])
    }

    pub fn tanh_d1(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::TanhD1, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Log, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Square, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Abs, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::Sum, &[a])
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Op::LogSumExpRows, &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, DiffError> {
        self.apply(Op::Concat(axis), parts)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.apply(Op::Slice { axis: Axis::Rows, start, len }, &[a])
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, DiffError> {
        self.apply(Op::Slice { axis: Axis::Cols, start, len }, &[a])
    }

    /// Mean of all entries as a `1×1` node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Row sums as a column, via a product with a constant ones vector.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let ones = self.constant(Tensor::filled(self.value(a).cols(), 1, 1.0));
        self.matmul(a, ones)
    }

    /// Repeats a column vector across `cols` columns.
    pub fn repeat_cols(&mut self, col: NodeId, cols: usize) -> Result<NodeId, DiffError> {
        let ones = self.constant(Tensor::filled(1, cols, 1.0));
        self.matmul(col, ones)
    }

    /// Repeats a row vector across `rows` rows.
    pub fn repeat_rows(&mut self, row: NodeId, rows: usize) -> Result<NodeId, DiffError> {
        let ones = self.constant(Tensor::filled(rows, 1, 1.0));
        self.matmul(ones, row)
    }
}

fn grad_slot(grads: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

/// Adds a gradient contribution shaped like `like` into the slot of `id`.
fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, like: &Tensor, values: impl Iterator<Item = f64>) {
    match &mut grads[id.0] {
        Some(t) => t.data_mut().iter_mut().zip(values).for_each(|(d, v)| *d += v),
        slot @ None => {
            let data: Vec<f64> = values.collect();
            debug_assert_eq!(data.len(), like.len());
            *slot = Some(Tensor::new(like.rows(), like.cols(), data).expect("gradient matches parent shape"));
        }
    }
}

fn unary(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor, input: &Tensor, d: impl Fn(f64) -> f64) {
    accumulate(grads, id, input, g.data().iter().zip(input.data()).map(|(x, &a)| x * d(a)));
}

/// Overflow-safe `log Σ exp(v)`; exact for constant rows.
pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn concat(parts: &[&Tensor], axis: Axis) -> Result<Tensor, DiffError> {
    match axis {
        Axis::Rows => {
            let cols = parts[0].cols();
            if parts.iter().any(|p| p.cols() != cols) {
                return Err(DiffError::Shape("concat rows: column counts differ".into()));
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.extend_from_slice(p.data());
            }
            Tensor::new(rows, cols, data)
        }
        Axis::Cols => {
            let rows = parts[0].rows();
            if parts.iter().any(|p| p.rows() != rows) {
                return Err(DiffError::Shape("concat cols: row counts differ".into()));
            }
            let cols = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::new(rows, cols, data)
        }
    }
}
