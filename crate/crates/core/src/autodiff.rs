//! Tape-based reverse-mode differentiation.
//!
//! A [`Trace`] is an append-only list of nodes. Every node stores its forward
//! value, the primitive that produced it and whatever that primitive needs for
//! its vector-Jacobian product. Inputs always precede their consumers, so the
//! reverse pass is a single backwards sweep over the list.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

/// Primitive names accepted by [`Trace::forward_op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Transpose,
    Outer,
    Add,
    Subtract,
    Multiply,
    AddRowBias,
    Sigmoid,
    Relu,
    Gelu,
    Sum,
    SquaredNorm,
    Dot,
}

impl Primitive {
    fn arity(self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Outer
            | Primitive::Add
            | Primitive::Subtract
            | Primitive::Multiply
            | Primitive::AddRowBias
            | Primitive::Dot => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Outer => "outer",
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "multiply",
            Primitive::AddRowBias => "add-row-bias",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Gelu => "gelu",
            Primitive::Sum => "sum",
            Primitive::SquaredNorm => "squared-norm",
            Primitive::Dot => "dot",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "outer" => Primitive::Outer,
            "add" => Primitive::Add,
            "subtract" => Primitive::Subtract,
            "multiply" | "elementwise-multiply" => Primitive::Multiply,
            "add-row-bias" => Primitive::AddRowBias,
            "sigmoid" => Primitive::Sigmoid,
            "relu" => Primitive::Relu,
            "gelu" => Primitive::Gelu,
            "sum" => Primitive::Sum,
            "squared-norm" => Primitive::SquaredNorm,
            "dot" => Primitive::Dot,
            other => return Err(Error::Input(format!("unknown primitive '{other}'"))),
        })
    }
}

#[derive(Clone, Debug)]
enum Op<F> {
    Input,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Outer(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Scale(NodeId, F),
    Sigmoid(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    RmsNorm {
        input: NodeId,
        gain: NodeId,
        // 1/sqrt(mean(x²)+eps) per normalized row
        inv_rms: Vec<F>,
    },
    Sum(NodeId),
    SquaredNorm(NodeId),
    Dot(NodeId, NodeId),
    GatherRows {
        table: NodeId,
        rows: Vec<usize>,
    },
    SliceRows {
        input: NodeId,
        start: usize,
    },
    Row {
        input: NodeId,
        index: usize,
    },
    Stack(Vec<NodeId>),
    Reshape(NodeId),
    BceWithLogitsSum {
        logits: NodeId,
        targets: Vec<F>,
    },
}

#[derive(Clone, Debug)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
#[derive(Clone, Debug, Default)]
pub struct Trace<F: Real = f64> {
    nodes: Vec<Node<F>>,
    finite_checks: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(GELU_C);
    let a = F::lit(GELU_A);
    let half = F::lit(0.5);
    let three = F::lit(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// `log(1 + exp(x))` without overflow.
fn softplus<F: Real>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<F: Real> Trace<F> {
    pub fn new() -> Self {
        Trace {
            nodes: Vec::new(),
            finite_checks: false,
        }
    }

    /// Every recorded value is checked for NaN/Inf and an error is returned at
    /// the first offending primitive.
    pub fn with_finite_checks() -> Self {
        Trace {
            nodes: Vec::new(),
            finite_checks: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Input) && self.nodes[id.0].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<&Tensor<F>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, inputs: &[NodeId]) -> Result<NodeId> {
        if self.finite_checks {
            value.ensure_finite("forward")?;
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Dispatch by primitive name; the typed methods below are the usual entry points.
    pub fn forward_op(&mut self, kind: Primitive, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::Input(format!(
                "{} takes {} inputs, got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Outer => self.outer(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Subtract => self.sub(inputs[0], inputs[1]),
            Primitive::Multiply => self.mul(inputs[0], inputs[1]),
            Primitive::AddRowBias => self.add_row_bias(inputs[0], inputs[1]),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Gelu => self.gelu(inputs[0]),
            Primitive::Sum => self.sum(inputs[0]),
            Primitive::SquaredNorm => self.squared_norm(inputs[0]),
            Primitive::Dot => self.dot(inputs[0], inputs[1]),
        }
    }

    /// Matrix product. Accepts `(m×k)·(k×n)`, `(m×k)·(k)` and `(k)·(k×n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let (m, k, n, shape) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, vec![*m, *n]),
            ([m, k], [k2]) if k == k2 => (*m, *k, 1, vec![*m]),
            ([k], [k2, n]) if k == k2 => (1, *k, *n, vec![*n]),
            (l, r) => return Err(shape_err("matmul", l, r)),
        };
        let data = Tensor::matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, data), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.check(a)?;
        let (r, c) = match av.shape() {
            [r, c] => (*r, *c),
            s => return Err(shape_err("transpose", s, &[])),
        };
        let data = Tensor::transpose_raw(av.data(), r, c);
        self.push(Op::Transpose(a), Tensor::from_parts(vec![c, r], data), &[a])
    }

    /// `a bᵀ` for vectors `a (m)` and `b (n)`.
    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.rank() != 1 || bv.rank() != 1 {
            return Err(shape_err("outer", av.shape(), bv.shape()));
        }
        let (m, n) = (av.len(), bv.len());
        let data = Tensor::matmul_raw(av.data(), bv.data(), m, 1, n);
        self.push(
            Op::Outer(a, b),
            Tensor::from_parts(vec![m, n], data),
            &[a, b],
        )
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: Op<F>,
        f: impl Fn(F, F) -> F,
    ) -> Result<NodeId> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(op, value, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("subtract", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same("multiply", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds vector `bias (n)` to every row of `m (r×n)`; also accepts a vector `m (n)`.
    pub fn add_row_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId> {
        let (mv, bv) = (self.check(m)?, self.check(bias)?);
        let n = match (mv.shape(), bv.shape()) {
            ([_, c], [n]) | ([c], [n]) if c == n => *n,
            (l, r) => return Err(shape_err("add-row-bias", l, r)),
        };
        let data = mv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % n])
            .collect();
        let value = Tensor::from_parts(mv.shape().to_vec(), data);
        self.push(Op::AddRowBias(m, bias), value, &[m, bias])
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> Result<NodeId> {
        let value = self.check(a)?.map(|x| x * s);
        self.push(Op::Scale(a, s), value, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.map(sigmoid);
        self.push(Op::Sigmoid(a), value, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.map(|x| x.max(F::zero()));
        self.push(Op::Relu(a), value, &[a])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.check(a)?.map(gelu);
        self.push(Op::Gelu(a), value, &[a])
    }

    /// `x / sqrt(mean(x²) + eps) * gain` along the last axis.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: F) -> Result<NodeId> {
        let (xv, gv) = (self.check(x)?, self.check(gain)?);
        let n = match (xv.shape(), gv.shape()) {
            ([n], [g]) | ([_, n], [g]) if n == g => *n,
            (l, r) => return Err(shape_err("rms-normalize", l, r)),
        };
        let nf = F::from_usize(n).unwrap();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_rms = Vec::with_capacity(xv.len() / n);
        for row in xv.data().chunks(n) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / nf;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(gv.data()).map(|(&v, &g)| v * inv * g));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        self.push(
            Op::RmsNorm {
                input: x,
                gain,
                inv_rms,
            },
            value,
            &[x, gain],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.check(a)?.sum_squares();
        self.push(Op::SquaredNorm(a), Tensor::scalar(s), &[a])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.rank() != 1 || av.shape() != bv.shape() {
            return Err(shape_err("dot", av.shape(), bv.shape()));
        }
        let s = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(s), &[a, b])
    }

    /// Selects rows of a matrix, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tv = self.check(table)?;
        let (r, c) = match tv.shape() {
            [r, c] => (*r, *c),
            s => return Err(shape_err("gather-row", s, &[rows.len()])),
        };
        if rows.is_empty() {
            return Err(Error::Input("gather-row with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather-row", tv.shape(), &[bad]));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::from_parts(vec![rows.len(), c], data);
        self.push(
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            value,
            &[table],
        )
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, m: NodeId, index: usize) -> Result<NodeId> {
        let mv = self.check(m)?;
        match mv.shape() {
            [r, _] if index < *r => {}
            s => return Err(shape_err("slice", s, &[index])),
        }
        let value = Tensor::vector(mv.row(index).to_vec());
        self.push(Op::Row { input: m, index }, value, &[m])
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, m: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let mv = self.check(m)?;
        let c = match mv.shape() {
            [r, c] if len > 0 && start + len <= *r => *c,
            s => return Err(shape_err("slice", s, &[start, len])),
        };
        let data = mv.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::from_parts(vec![len, c], data);
        self.push(Op::SliceRows { input: m, start }, value, &[m])
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, vs: &[NodeId]) -> Result<NodeId> {
        let first = vs
            .first()
            .ok_or_else(|| Error::Input("stack of nothing".into()))?;
        let n = self.check(*first)?.len();
        let mut data = Vec::with_capacity(vs.len() * n);
        for &v in vs {
            let t = self.check(v)?;
            if t.rank() != 1 || t.len() != n {
                return Err(shape_err("stack", &[n], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_parts(vec![vs.len(), n], data);
        self.push(Op::Stack(vs.to_vec()), value, vs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.check(a)?.clone().reshaped(shape)?;
        self.push(Op::Reshape(a), value, &[a])
    }

    /// `Σ softplus(l) − y·l`, the summed binary cross-entropy of `sigmoid(l)` against `y`.
    pub fn bce_with_logits_sum(&mut self, logits: NodeId, targets: &[F]) -> Result<NodeId> {
        let lv = self.check(logits)?;
        if lv.rank() != 1 || lv.len() != targets.len() {
            return Err(shape_err("bce-with-logits", lv.shape(), &[targets.len()]));
        }
        let s = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &y)| softplus(l) - y * l)
            .sum();
        self.push(
            Op::BceWithLogitsSum {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(s),
            &[logits],
        )
    }

    /// Gradient of the scalar `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<F>> {
        let out = self.check(output)?;
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(Tensor::filled(out.shape(), F::one()));
        }

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<F>,
        value: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                match (av.shape(), bv.shape()) {
                    ([m, k], [_, n]) => {
                        let (m, k, n) = (*m, *k, *n);
                        if wants(*a) {
                            let bt = Tensor::transpose_raw(bv.data(), k, n);
                            let da = Tensor::matmul_raw(g.data(), &bt, m, n, k);
                            self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                        }
                        if wants(*b) {
                            let at = Tensor::transpose_raw(av.data(), m, k);
                            let db = Tensor::matmul_raw(&at, g.data(), k, m, n);
                            self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                        }
                    }
                    ([m, k], [_]) => {
                        let (m, k) = (*m, *k);
                        if wants(*a) {
                            let da = Tensor::matmul_raw(g.data(), bv.data(), m, 1, k);
                            self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                        }
                        if wants(*b) {
                            let db = Tensor::matmul_raw(g.data(), av.data(), 1, m, k);
                            self.accumulate(grads, *b, Tensor::from_parts(vec![k], db));
                        }
                    }
                    ([k], [_, n]) => {
                        let (k, n) = (*k, *n);
                        if wants(*a) {
                            let da = Tensor::matmul_raw(bv.data(), g.data(), k, n, 1);
                            self.accumulate(grads, *a, Tensor::from_parts(vec![k], da));
                        }
                        if wants(*b) {
                            let db = Tensor::matmul_raw(av.data(), g.data(), k, 1, n);
                            self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                        }
                    }
                    _ => unreachable!("matmul shapes validated in forward"),
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (value.shape()[0], value.shape()[1]);
                let da = Tensor::transpose_raw(g.data(), r, c);
                self.accumulate(grads, *a, Tensor::from_parts(vec![c, r], da));
            }
            Op::Outer(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (av.len(), bv.len());
                if wants(*a) {
                    let da = Tensor::matmul_raw(g.data(), bv.data(), m, n, 1);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m], da));
                }
                if wants(*b) {
                    let db = Tensor::matmul_raw(av.data(), g.data(), 1, m, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n], db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if wants(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let da = g
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
                }
                if wants(*b) {
                    let db = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_parts(g.shape().to_vec(), db));
                }
            }
            Op::AddRowBias(m, bias) => {
                self.accumulate(grads, *m, g.clone());
                if wants(*bias) {
                    let n = val(*bias).len();
                    let mut db = vec![F::zero(); n];
                    for row in g.data().chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![n], db));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * *s)),
            Op::Sigmoid(a) => {
                let da = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(&gi, &y)| gi * y * (F::one() - y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
            }
            Op::Relu(a) => {
                let da = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gi, &x)| if x > F::zero() { gi } else { F::zero() })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
            }
            Op::Gelu(a) => {
                let da = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&gi, &x)| gi * gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(g.shape().to_vec(), da));
            }
            Op::RmsNorm {
                input,
                gain,
                inv_rms,
            } => {
                let (xv, gv) = (val(*input), val(*gain));
                let n = gv.len();
                let nf = F::from_usize(n).unwrap();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgain = vec![F::zero(); n];
                for ((xr, gr), &inv) in xv.data().chunks(n).zip(g.data().chunks(n)).zip(inv_rms) {
                    // v = upstream ⊙ gain; dx = inv·v − x·inv³·(v·x)/n
                    let vx: F = gr
                        .iter()
                        .zip(gv.data())
                        .zip(xr)
                        .map(|((&u, &w), &x)| u * w * x)
                        .sum();
                    let coef = inv * inv * inv * vx / nf;
                    for i in 0..n {
                        dx.push(inv * gr[i] * gv.data()[i] - xr[i] * coef);
                        dgain[i] = dgain[i] + gr[i] * xr[i] * inv;
                    }
                }
                if wants(*input) {
                    self.accumulate(grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if wants(*gain) {
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![n], dgain));
                }
            }
            Op::Sum(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, Tensor::filled(av.shape(), g.item()));
            }
            Op::SquaredNorm(a) => {
                let two_g = g.item() + g.item();
                self.accumulate(grads, *a, val(*a).map(|x| two_g * x));
            }
            Op::Dot(a, b) => {
                let gi = g.item();
                if wants(*a) {
                    self.accumulate(grads, *a, val(*b).map(|x| gi * x));
                }
                if wants(*b) {
                    self.accumulate(grads, *b, val(*a).map(|x| gi * x));
                }
            }
            Op::GatherRows { table, rows } => {
                let tv = val(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &x) in dt.row_mut(r).iter_mut().zip(g.row(k)) {
                        *d = *d + x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::SliceRows { input, start } => {
                let mv = val(*input);
                let c = mv.shape()[1];
                let mut dm = Tensor::zeros(mv.shape());
                dm.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *input, dm);
            }
            Op::Row { input, index } => {
                let mut dm = Tensor::zeros(val(*input).shape());
                dm.row_mut(*index).copy_from_slice(g.data());
                self.accumulate(grads, *input, dm);
            }
            Op::Stack(vs) => {
                for (k, &v) in vs.iter().enumerate() {
                    if wants(v) {
                        self.accumulate(grads, v, Tensor::vector(g.row(k).to_vec()));
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::BceWithLogitsSum { logits, targets } => {
                let gi = g.item();
                let dl = val(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&l, &y)| gi * (sigmoid(l) - y))
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_parts(vec![targets.len()], dl));
            }
        }
    }
}

/// Result of [`Trace::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<F: Real = f64> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `id`, or `None` when nothing flowed into it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node of the given trace, zero-filled when unused.
    pub fn wrt(&self, trace: &Trace<F>, id: NodeId) -> Tensor<F> {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(trace.value(id).shape()))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `backward()` with central finite differences at every coordinate
/// of every input.
///
/// `f` receives a fresh trace and one leaf per entry of `point`, and returns
/// the scalar output node.
pub fn grad_check<Func>(f: Func, point: &[Tensor<f64>], epsilon: f64) -> Result<GradCheckReport>
where
    Func: Fn(&mut Trace<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Input(format!(
            "grad_check epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<(Trace<f64>, Vec<NodeId>, NodeId)> {
        let mut trace = Trace::new();
        let leaves: Vec<NodeId> = inputs.iter().map(|t| trace.leaf(t.clone())).collect();
        let out = f(&mut trace, &leaves)?;
        Ok((trace, leaves, out))
    };

    let (trace, leaves, out) = eval(point)?;
    let grads = trace.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut perturbed = point.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(&trace, *leaf);
        for ei in 0..point[li].len() {
            let orig = point[li].data()[ei];
            let mut probe = |x: f64| -> Result<f64> {
                perturbed[li].data_mut()[ei] = x;
                let (t, _, o) = eval(&perturbed)?;
                let v = t.value(o).item();
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "grad_check: f = {v} with input {li} element {ei} set to {x}"
                    )));
                }
                Ok(v)
            };
            let plus = probe(orig + epsilon)?;
            let minus = probe(orig - epsilon)?;
            perturbed[li].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: rel,
                    worst: (li, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn rms_norm_of_constant_vector_is_one() {
        let mut t = Trace::new();
        let x = t.leaf(v(&[3.0, 3.0, 3.0]));
        let g = t.leaf(v(&[1.0, 1.0, 1.0]));
        let y = t.rms_norm(x, g, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut t = Trace::new();
        let i = t.constant(Tensor::identity(2));
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap());
        let y = t.matmul(i, a).unwrap();
        assert_eq!(t.value(y), t.value(a));
    }

    #[test]
    fn dot_hand_computed() {
        let mut t = Trace::new();
        let a = t.leaf(v(&[1.0, 2.0, 3.0]));
        let b = t.leaf(v(&[4.0, 5.0, 6.0]));
        let d = t.dot(a, b).unwrap();
        assert_eq!(t.value(d).item(), 32.0);
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut t = Trace::<f64>::new();
        let a = t.leaf(Tensor::zeros(&[2, 3]));
        let b = t.leaf(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn unknown_primitive_name() {
        assert!("convolve".parse::<Primitive>().is_err());
        assert_eq!("dot".parse::<Primitive>().unwrap(), Primitive::Dot);
    }

    #[test]
    fn forward_op_checks_arity() {
        let mut t = Trace::new();
        let a = t.leaf(v(&[1.0]));
        assert!(t.forward_op(Primitive::Dot, &[a]).is_err());
        let s = t.forward_op(Primitive::Sum, &[a]).unwrap();
        assert_eq!(t.value(s).item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let mut t = Trace::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).item(), 6.0);
    }

    #[test]
    fn reconstruction_gradient_at_zero() {
        // d/dW ||W k - v||^2 = 2 (W k - v) kᵀ = -2 for W=0, k=v=1
        let mut t = Trace::new();
        let w = t.leaf(Tensor::zeros(&[1, 1]));
        let k = t.constant(v(&[1.0]));
        let target = t.constant(v(&[1.0]));
        let pred = t.matmul(w, k).unwrap();
        let r = t.sub(pred, target).unwrap();
        let l = t.squared_norm(r).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(&t, w).data(), &[-2.0]);
    }

    #[test]
    fn constant_output_has_zero_gradients() {
        let mut t = Trace::new();
        let x = t.leaf(v(&[1.0, 2.0]));
        let c = t.constant(Tensor::scalar(4.0));
        let g = t.backward(c).unwrap();
        assert!(g.get(x).is_none());
        assert_eq!(g.wrt(&t, x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Trace::new();
        let x = t.leaf(v(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn finite_checks_reject_overflow() {
        let mut t = Trace::<f64>::with_finite_checks();
        let x = t.leaf(Tensor::scalar(1e200));
        assert!(t.mul(x, x).is_err());
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut t = Trace::new();
        let l = t.leaf(v(&[0.0, 0.0]));
        let s = t.bce_with_logits_sum(l, &[1.0, 0.0]).unwrap();
        assert!((t.value(s).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let f = |t: &mut Trace<f64>, l: &[NodeId]| t.sum(l[0]);
        assert!(grad_check(f, &[v(&[1.0])], 1e-2).is_err());
        assert!(grad_check(f, &[v(&[1.0])], 1e-9).is_err());
    }

    #[test]
    fn grad_check_reports_non_finite_coordinate() {
        // sqrt-free way to blow up: exp-like growth through repeated squaring
        let f = |t: &mut Trace<f64>, l: &[NodeId]| {
            let mut x = l[0];
            for _ in 0..12 {
                x = t.mul(x, x)?;
            }
            t.sum(x)
        };
        let err = grad_check(f, &[v(&[1e3])], 1e-5).unwrap_err();
        assert!(err.to_string().contains("element 0"), "{err}");
    }
}
