//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable computation is recorded as a sequence of primitive
//! applications on a [`Tape`]. Tensors are dense, row-major `f64`; the empty
//! shape is a scalar with one element. The tape owns all forward buffers,
//! user code keeps lightweight [`Var`] handles and reads gradients back from
//! the [`Gradients`] map produced by [`Tape::backward`].
//!
//! Forward values are checked for NaN/Inf as they are produced, so a
//! non-finite number is reported at the primitive that created it instead of
//! surfacing later as a garbage loss.

use crate::error::{Error, Result};

/// Step size for [`grad_check`] central differences, scaled per coordinate
/// by `max(1, |x|)`.
pub const GRAD_CHECK_H: f64 = 1e-5;

// ── tensors ────────────────────────────────────────────────────────────────

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Set when this tensor was read back from a tape node.
    pub node: Option<usize>,
}

impl Tensor {
    pub fn from_shape(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data, requires_grad: false, node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_shape(vec![], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::from_shape(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::from_shape(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_shape(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }
}

// ── primitives ─────────────────────────────────────────────────────────────

/// Identifies a primitive together with its non-tensor parameters; the unit
/// of dispatch for [`Tape::apply_primitive`].
#[derive(Debug, Clone)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Relu,
    Softmax,
    LogSoftmax,
    CrossEntropy { labels: Vec<usize> },
    Mean,
    Sum,
    Scale { c: f64 },
    SqL2,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Mask { mask: Vec<f64> },
}

impl PrimitiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::LogSoftmax => "log_softmax",
            PrimitiveKind::CrossEntropy { .. } => "cross_entropy",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Scale { .. } => "scale",
            PrimitiveKind::SqL2 => "sq_l2",
            PrimitiveKind::Concat { .. } => "concat",
            PrimitiveKind::Slice { .. } => "slice",
            PrimitiveKind::Mask { .. } => "mask",
        }
    }
}

/// How the two operands of an elementwise binary op line up.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    /// Rhs is a length-n vector broadcast over the rows of an [m, n] lhs.
    RowRhs,
    /// Lhs is a length-n vector broadcast over the rows of an [m, n] rhs.
    RowLhs,
    /// Rhs has one element.
    ScalarRhs,
    /// Lhs has one element.
    ScalarLhs,
}

fn broadcast(prim: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Bcast)> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    if a == b {
        return Ok((a.to_vec(), Bcast::Same));
    }
    if numel(b) == 1 {
        return Ok((a.to_vec(), Bcast::ScalarRhs));
    }
    if numel(a) == 1 {
        return Ok((b.to_vec(), Bcast::ScalarLhs));
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Ok((a.to_vec(), Bcast::RowRhs));
    }
    if b.len() == 2 && a.len() == 1 && b[1] == a[0] {
        return Ok((b.to_vec(), Bcast::RowLhs));
    }
    Err(Error::shape(prim, format!("cannot combine shapes {a:?} and {b:?}")))
}

/// Rows/cols view of a tensor treated as a stack of rows; 1-D is one row.
fn as_rows(prim: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(Error::shape(prim, format!("need 1-D or 2-D input, got {shape:?}"))),
    }
}

// ── tape ───────────────────────────────────────────────────────────────────

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum OpRecord {
    Leaf,
    Add { a: usize, b: usize, bc: Bcast },
    Sub { a: usize, b: usize, bc: Bcast },
    Mul { a: usize, b: usize, bc: Bcast },
    MatMul { a: usize, b: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Softmax { x: usize },
    LogSoftmax { x: usize },
    CrossEntropy { x: usize, labels: Vec<usize>, probs: Vec<f64> },
    Mean { x: usize },
    Sum { x: usize },
    Scale { x: usize, c: f64 },
    SqL2 { x: usize },
    Concat { a: usize, b: usize, axis: usize },
    Slice { x: usize, axis: usize, start: usize, len: usize },
    Mask { x: usize, mask: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Slot {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires: bool,
    op: OpRecord,
}

/// Wengert list of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    slots: Vec<Slot>,
}

/// Per-node gradients produced by [`Tape::backward`]. Leaves the backward
/// sweep never reached read back as zeros.
#[derive(Debug)]
pub struct Gradients {
    entries: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.entries[v.0] {
            Some(g) => Tensor::from_shape(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.slots[v.0].value
    }

    pub fn numel(&self, v: Var) -> usize {
        self.slots[v.0].shape.iter().product()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        if self.numel(v) != 1 {
            return Err(Error::shape(
                "scalar_value",
                format!("node has shape {:?}", self.shape(v)),
            ));
        }
        Ok(self.slots[v.0].value[0])
    }

    /// Read a node back out as a tensor carrying its node id.
    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = Tensor::from_shape(self.shape(v).to_vec(), self.value(v).to_vec());
        t.requires_grad = self.slots[v.0].requires;
        t.node = Some(v.0);
        t
    }

    fn push(&mut self, prim: &'static str, shape: Vec<usize>, value: Vec<f64>, requires: bool, op: OpRecord) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("output of `{prim}`")));
        }
        self.slots.push(Slot { shape, value, requires, op });
        Ok(Var(self.slots.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.slots[v.0].requires
    }

    // ── node constructors ──────────────────────────────────────────────

    /// Register an input tensor on the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push("leaf", t.shape.clone(), t.data.clone(), t.requires_grad, OpRecord::Leaf)
    }

    /// Register a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push("leaf", shape, data, false, OpRecord::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_binary("mul", a, b)
    }

    fn ew_binary(&mut self, prim: &'static str, a: Var, b: Var) -> Result<Var> {
        let (shape, bc) = broadcast(prim, self.shape(a), self.shape(b))?;
        let n: usize = shape.iter().product();
        let (av, bv) = (&self.slots[a.0].value, &self.slots[b.0].value);
        let cols = *shape.last().unwrap_or(&1);
        let lookup = |side: &[f64], i: usize| -> f64 {
            match bc {
                Bcast::Same => side[i],
                Bcast::ScalarRhs | Bcast::ScalarLhs => {
                    if side.len() == 1 {
                        side[0]
                    } else {
                        side[i]
                    }
                }
                Bcast::RowRhs | Bcast::RowLhs => {
                    if side.len() == n {
                        side[i]
                    } else {
                        side[i % cols]
                    }
                }
            }
        };
        let value: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (lookup(av, i), lookup(bv, i));
                match prim {
                    "add" => x + y,
                    "sub" => x - y,
                    _ => x * y,
                }
            })
            .collect();
        let requires = self.requires(a) || self.requires(b);
        let op = match prim {
            "add" => OpRecord::Add { a: a.0, b: b.0, bc },
            "sub" => OpRecord::Sub { a: a.0, b: b.0, bc },
            _ => OpRecord::Mul { a: a.0, b: b.0, bc },
        };
        self.push(prim, shape, value, requires, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        {
            let (av, bv) = (&self.slots[a.0].value, &self.slots[b.0].value);
            for i in 0..m {
                for l in 0..k {
                    let x = av[i * k + l];
                    for j in 0..n {
                        value[i * n + j] += x * bv[l * n + j];
                    }
                }
            }
        }
        let requires = self.requires(a) || self.requires(b);
        self.push("matmul", vec![m, n], value, requires, OpRecord::MatMul { a: a.0, b: b.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value: Vec<f64> = self.slots[x.0].value.iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push("tanh", shape, value, requires, OpRecord::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value: Vec<f64> = self.slots[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push("relu", shape, value, requires, OpRecord::Relu { x: x.0 })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_rows("softmax", self.shape(x))?;
        let value = softmax_rows(&self.slots[x.0].value, rows, cols);
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push("softmax", shape, value, requires, OpRecord::Softmax { x: x.0 })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = as_rows("log_softmax", self.shape(x))?;
        let value = log_softmax_rows(&self.slots[x.0].value, rows, cols);
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push("log_softmax", shape, value, requires, OpRecord::LogSoftmax { x: x.0 })
    }

    /// Mean negative log-likelihood of integer class labels under the row
    /// softmax of `logits` ([m, c]).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("cross_entropy", format!("logits must be 2-D, got {shape:?}")));
        }
        let (m, c) = (shape[0], shape[1]);
        if labels.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {m} logit rows", labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let lsm = log_softmax_rows(&self.slots[logits.0].value, m, c);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            total -= lsm[i * c + y];
        }
        let probs: Vec<f64> = lsm.iter().map(|v| v.exp()).collect();
        let requires = self.requires(logits);
        self.push(
            "cross_entropy",
            vec![],
            vec![total / m as f64],
            requires,
            OpRecord::CrossEntropy { x: logits.0, labels: labels.to_vec(), probs },
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.slots[x.0].value;
        let value = v.iter().sum::<f64>() / v.len() as f64;
        let requires = self.requires(x);
        self.push("mean", vec![], vec![value], requires, OpRecord::Mean { x: x.0 })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = self.slots[x.0].value.iter().sum::<f64>();
        let requires = self.requires(x);
        self.push("sum", vec![], vec![value], requires, OpRecord::Sum { x: x.0 })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::non_finite("scale constant".to_string()));
        }
        let value: Vec<f64> = self.slots[x.0].value.iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push("scale", shape, value, requires, OpRecord::Scale { x: x.0, c })
    }

    /// Squared Euclidean norm of all elements.
    pub fn sq_l2(&mut self, x: Var) -> Result<Var> {
        let value = self.slots[x.0].value.iter().map(|v| v * v).sum::<f64>();
        let requires = self.requires(x);
        self.push("sq_l2", vec![], vec![value], requires, OpRecord::SqL2 { x: x.0 })
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([p], [q]) if axis == 0 => vec![p + q],
            ([m1, n1], [m2, n2]) if axis == 0 && n1 == n2 => vec![m1 + m2, *n1],
            ([m1, n1], [m2, n2]) if axis == 1 && m1 == m2 => vec![*m1, n1 + n2],
            _ => {
                return Err(Error::shape(
                    "concat",
                    format!("cannot concat {sa:?} and {sb:?} along axis {axis}"),
                ))
            }
        };
        let (av, bv) = (&self.slots[a.0].value, &self.slots[b.0].value);
        let value = if axis == 0 || sa.len() == 1 {
            let mut v = av.clone();
            v.extend_from_slice(bv);
            v
        } else {
            let (m, n1, n2) = (sa[0], sa[1], sb[1]);
            let mut v = Vec::with_capacity(m * (n1 + n2));
            for i in 0..m {
                v.extend_from_slice(&av[i * n1..(i + 1) * n1]);
                v.extend_from_slice(&bv[i * n2..(i + 1) * n2]);
            }
            v
        };
        let requires = self.requires(a) || self.requires(b);
        self.push("concat", shape, value, requires, OpRecord::Concat { a: a.0, b: b.0, axis })
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} along axis {axis} of {sx:?}", start + len),
            ));
        }
        let xv = &self.slots[x.0].value;
        let (shape, value) = if sx.len() == 1 {
            (vec![len], xv[start..start + len].to_vec())
        } else if axis == 0 {
            let n = sx[1];
            (vec![len, n], xv[start * n..(start + len) * n].to_vec())
        } else {
            let (m, n) = (sx[0], sx[1]);
            let mut v = Vec::with_capacity(m * len);
            for i in 0..m {
                v.extend_from_slice(&xv[i * n + start..i * n + start + len]);
            }
            (vec![m, len], v)
        };
        let requires = self.requires(x);
        self.push("slice", shape, value, requires, OpRecord::Slice { x: x.0, axis, start, len })
    }

    /// Elementwise product with a constant 0/1-style mask (no gradient flows
    /// to the mask).
    pub fn mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        if mask.len() != self.numel(x) {
            return Err(Error::shape(
                "mask",
                format!("mask has {} elements, input shape {:?}", mask.len(), self.shape(x)),
            ));
        }
        let value: Vec<f64> =
            self.slots[x.0].value.iter().zip(mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let requires = self.requires(x);
        self.push("mask", shape, value, requires, OpRecord::Mask { x: x.0, mask: mask.to_vec() })
    }

    /// Fold a non-empty list of same-shaped vars with `add`.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::shape("add", "add_n of zero vars".to_string()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Dynamic dispatch over the primitive set; the unit tests and the
    /// self-check sweep drive every primitive through this one entry point.
    pub fn apply_primitive(&mut self, kind: &PrimitiveKind, inputs: &[Var]) -> Result<Var> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(
                    kind.name(),
                    format!("expects {n} input(s), got {}", inputs.len()),
                ));
            }
            Ok(())
        };
        match kind {
            PrimitiveKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            PrimitiveKind::Sub => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            PrimitiveKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            PrimitiveKind::MatMul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            PrimitiveKind::Tanh => {
                want(1)?;
                self.tanh(inputs[0])
            }
            PrimitiveKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            PrimitiveKind::Softmax => {
                want(1)?;
                self.softmax(inputs[0])
            }
            PrimitiveKind::LogSoftmax => {
                want(1)?;
                self.log_softmax(inputs[0])
            }
            PrimitiveKind::CrossEntropy { labels } => {
                want(1)?;
                self.cross_entropy(inputs[0], labels)
            }
            PrimitiveKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            PrimitiveKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            PrimitiveKind::Scale { c } => {
                want(1)?;
                self.scale(inputs[0], *c)
            }
            PrimitiveKind::SqL2 => {
                want(1)?;
                self.sq_l2(inputs[0])
            }
            PrimitiveKind::Concat { axis } => {
                want(2)?;
                self.concat(inputs[0], inputs[1], *axis)
            }
            PrimitiveKind::Slice { axis, start, len } => {
                want(1)?;
                self.slice(inputs[0], *axis, *start, *len)
            }
            PrimitiveKind::Mask { mask } => {
                want(1)?;
                self.mask(inputs[0], mask)
            }
        }
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Deterministic: nodes are visited in
    /// strictly decreasing id order and accumulation order is fixed.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.numel(root) != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        let mut entries: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        entries[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if entries[id].is_none() || !self.slots[id].requires {
                continue;
            }
            let g = entries[id].take().unwrap();
            self.propagate(id, &g, &mut entries);
            entries[id] = Some(g);
        }
        let shapes = self.slots.iter().map(|s| s.shape.clone()).collect();
        Ok(Gradients { entries, shapes })
    }

    fn accum(&self, entries: &mut [Option<Vec<f64>>], id: usize, update: impl Fn(&mut [f64])) {
        if !self.slots[id].requires {
            return;
        }
        let slot_len = self.slots[id].value.len();
        let g = entries[id].get_or_insert_with(|| vec![0.0; slot_len]);
        update(g);
    }

    fn propagate(&self, id: usize, g: &[f64], entries: &mut [Option<Vec<f64>>]) {
        let slot = &self.slots[id];
        match &slot.op {
            OpRecord::Leaf => {}
            OpRecord::Add { a, b, bc } => {
                self.bcast_backward(entries, *a, *b, *bc, g, |_, _| (1.0, 1.0));
            }
            OpRecord::Sub { a, b, bc } => {
                self.bcast_backward(entries, *a, *b, *bc, g, |_, _| (1.0, -1.0));
            }
            OpRecord::Mul { a, b, bc } => {
                self.bcast_backward(entries, *a, *b, *bc, g, |x, y| (y, x));
            }
            OpRecord::MatMul { a, b } => {
                let (m, k) = (self.slots[*a].shape[0], self.slots[*a].shape[1]);
                let n = self.slots[*b].shape[1];
                let (av, bv) = (&self.slots[*a].value, &self.slots[*b].value);
                self.accum(entries, *a, |ga| {
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] += acc;
                        }
                    }
                });
                self.accum(entries, *b, |gb| {
                    for l in 0..k {
                        for i in 0..m {
                            let x = av[i * k + l];
                            for j in 0..n {
                                gb[l * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            OpRecord::Tanh { x } => {
                let y = &slot.value;
                self.accum(entries, *x, |gx| {
                    for i in 0..y.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            OpRecord::Relu { x } => {
                let xv = &self.slots[*x].value;
                self.accum(entries, *x, |gx| {
                    for i in 0..xv.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            OpRecord::Softmax { x } => {
                let y = &slot.value;
                let (rows, cols) = as_rows("softmax", &slot.shape).unwrap();
                self.accum(entries, *x, |gx| {
                    for r in 0..rows {
                        let row = r * cols;
                        let dot: f64 = (0..cols).map(|j| g[row + j] * y[row + j]).sum();
                        for j in 0..cols {
                            gx[row + j] += y[row + j] * (g[row + j] - dot);
                        }
                    }
                });
            }
            OpRecord::LogSoftmax { x } => {
                let y = &slot.value;
                let (rows, cols) = as_rows("log_softmax", &slot.shape).unwrap();
                self.accum(entries, *x, |gx| {
                    for r in 0..rows {
                        let row = r * cols;
                        let gsum: f64 = (0..cols).map(|j| g[row + j]).sum();
                        for j in 0..cols {
                            gx[row + j] += g[row + j] - y[row + j].exp() * gsum;
                        }
                    }
                });
            }
            OpRecord::CrossEntropy { x, labels, probs } => {
                let m = labels.len();
                let c = probs.len() / m;
                let scale = g[0] / m as f64;
                self.accum(entries, *x, |gx| {
                    for i in 0..m {
                        for j in 0..c {
                            let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                            gx[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
            OpRecord::Mean { x } => {
                let n = self.slots[*x].value.len() as f64;
                let gv = g[0] / n;
                self.accum(entries, *x, |gx| {
                    for e in gx.iter_mut() {
                        *e += gv;
                    }
                });
            }
            OpRecord::Sum { x } => {
                let gv = g[0];
                self.accum(entries, *x, |gx| {
                    for e in gx.iter_mut() {
                        *e += gv;
                    }
                });
            }
            OpRecord::Scale { x, c } => {
                self.accum(entries, *x, |gx| {
                    for (e, gi) in gx.iter_mut().zip(g) {
                        *e += c * gi;
                    }
                });
            }
            OpRecord::SqL2 { x } => {
                let xv = &self.slots[*x].value;
                let gv = g[0];
                self.accum(entries, *x, |gx| {
                    for (e, xi) in gx.iter_mut().zip(xv) {
                        *e += 2.0 * xi * gv;
                    }
                });
            }
            OpRecord::Concat { a, b, axis } => {
                let (sa, sb) = (&self.slots[*a].shape, &self.slots[*b].shape);
                if *axis == 0 || sa.len() == 1 {
                    let na = self.slots[*a].value.len();
                    self.accum(entries, *a, |ga| {
                        for i in 0..na {
                            ga[i] += g[i];
                        }
                    });
                    let nb = self.slots[*b].value.len();
                    self.accum(entries, *b, |gb| {
                        for i in 0..nb {
                            gb[i] += g[na + i];
                        }
                    });
                } else {
                    let (m, n1, n2) = (sa[0], sa[1], sb[1]);
                    let n = n1 + n2;
                    self.accum(entries, *a, |ga| {
                        for i in 0..m {
                            for j in 0..n1 {
                                ga[i * n1 + j] += g[i * n + j];
                            }
                        }
                    });
                    self.accum(entries, *b, |gb| {
                        for i in 0..m {
                            for j in 0..n2 {
                                gb[i * n2 + j] += g[i * n + n1 + j];
                            }
                        }
                    });
                }
            }
            OpRecord::Slice { x, axis, start, len } => {
                let sx = &self.slots[*x].shape;
                if sx.len() == 1 || *axis == 0 {
                    let n = if sx.len() == 1 { 1 } else { sx[1] };
                    self.accum(entries, *x, |gx| {
                        for (i, gi) in g.iter().enumerate() {
                            gx[start * n + i] += gi;
                        }
                    });
                } else {
                    let (m, n) = (sx[0], sx[1]);
                    let _ = m;
                    self.accum(entries, *x, |gx| {
                        for (i, chunk) in g.chunks(*len).enumerate() {
                            for (j, gi) in chunk.iter().enumerate() {
                                gx[i * n + start + j] += gi;
                            }
                        }
                    });
                }
            }
            OpRecord::Mask { x, mask } => {
                self.accum(entries, *x, |gx| {
                    for i in 0..mask.len() {
                        gx[i] += g[i] * mask[i];
                    }
                });
            }
        }
    }

    fn bcast_backward(
        &self,
        entries: &mut [Option<Vec<f64>>],
        a: usize,
        b: usize,
        bc: Bcast,
        g: &[f64],
        coeff: impl Fn(f64, f64) -> (f64, f64),
    ) {
        let out_len = g.len();
        let (av, bv) = (&self.slots[a].value, &self.slots[b].value);
        let cols = match bc {
            Bcast::RowRhs => self.slots[b].value.len(),
            Bcast::RowLhs => self.slots[a].value.len(),
            _ => 1,
        };
        let pick = |side: &[f64], i: usize| -> f64 {
            if side.len() == out_len {
                side[i]
            } else if side.len() == 1 {
                side[0]
            } else {
                side[i % cols]
            }
        };
        self.accum(entries, a, |ga| {
            for i in 0..out_len {
                let (ca, _) = coeff(pick(av, i), pick(bv, i));
                let slot = if av.len() == out_len {
                    i
                } else if av.len() == 1 {
                    0
                } else {
                    i % cols
                };
                ga[slot] += ca * g[i];
            }
        });
        self.accum(entries, b, |gb| {
            for i in 0..out_len {
                let (_, cb) = coeff(pick(av, i), pick(bv, i));
                let slot = if bv.len() == out_len {
                    i
                } else if bv.len() == 1 {
                    0
                } else {
                    i % cols
                };
                gb[slot] += cb * g[i];
            }
        });
    }
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= sum;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for j in 0..cols {
            out[r * cols + j] = row[j] - logsum;
        }
    }
    out
}

// ── gradient checking ──────────────────────────────────────────────────────

/// Compare the analytic gradient of a scalar function against central
/// differences at `point`. Returns the max over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`. Coordinates of tensors with
/// `requires_grad == false` are skipped. The callback must be deterministic:
/// it is re-evaluated `2 * numel` times at perturbed points.
pub fn grad_check<F>(point: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t)).collect::<Result<_>>()?;
    let root = f(&mut tape, &vars)?;
    if tape.numel(root) != 1 {
        return Err(Error::shape(
            "grad_check",
            format!("function must be scalar, got {:?}", tape.shape(root)),
        ));
    }
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pt
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = false;
                tape.leaf(&t)
            })
            .collect::<Result<_>>()?;
        let root = f(&mut tape, &vars)?;
        tape.scalar_value(root)
    };

    let mut max_rel: f64 = 0.0;
    for (ti, t) in point.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        for j in 0..t.numel() {
            let step = h * t.data[j].abs().max(1.0);
            let mut plus = point.to_vec();
            plus[ti].data[j] += step;
            let mut minus = point.to_vec();
            minus[ti].data[j] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::non_finite("grad_check central difference".to_string()));
            }
            let rel = (analytic[ti].data[j] - numeric).abs() / numeric.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Contract a tensor-valued node to a scalar with fixed random weights so a
/// primitive's full Jacobian is exercised through one backward pass.
fn contract(tape: &mut Tape, v: Var, w: &[f64]) -> Result<Var> {
    let c = tape.constant(tape.shape(v).to_vec(), w.to_vec())?;
    let y = tape.mul(v, c)?;
    tape.sum(y)
}

/// Drive every primitive through [`grad_check`] at `num_points` random
/// points each and return the worst relative error seen. Used by the CLI
/// self-check and the acceptance suite.
pub fn primitive_grad_sweep(num_points: usize, seed: u64) -> Result<f64> {
    use crate::rng::RngStream;

    type Case = (&'static str, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>, Vec<Tensor>);

    let root_rng = RngStream::from_seed(seed);
    let mut worst: f64 = 0.0;

    // Relu gets inputs bounded away from its kink so the central difference
    // is valid; everything else draws standard normals.
    fn draw(rng: &mut RngStream, n: usize, avoid_zero: bool) -> Vec<f64> {
        (0..n)
            .map(|_| {
                if avoid_zero {
                    let mag = rng.uniform_in(0.1, 1.5);
                    if rng.uniform() < 0.5 {
                        -mag
                    } else {
                        mag
                    }
                } else {
                    rng.standard_normal()
                }
            })
            .collect()
    }

    fn mat(rng: &mut RngStream, r: usize, c: usize, avoid_zero: bool) -> Tensor {
        Tensor::matrix(r, c, draw(rng, r * c, avoid_zero)).with_grad()
    }

    for p in 0..num_points {
        let mut rng = root_rng.split_indexed("point", p as u64);
        let m = 2 + rng.below(3);
        let n = 2 + rng.below(3);
        let k = 2 + rng.below(3);
        let labels: Vec<usize> = (0..m).map(|_| rng.below(n)).collect();
        let w_full = draw(&mut rng, m * n, false);
        let w_sliced = w_full[..(m - 1) * n].to_vec();
        let mask: Vec<f64> =
            (0..m * n).map(|_| if rng.uniform() < 0.5 { 0.0 } else { 1.0 }).collect();
        let c = rng.uniform_in(-2.0, 2.0);

        let unary = |w: Vec<f64>, f: fn(&mut Tape, Var) -> Result<Var>| {
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = f(t, v[0])?;
                contract(t, y, &w)
            })
        };

        let cases: Vec<Case> = vec![
            (
                "add",
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    t.sum(y)
                }),
                vec![mat(&mut rng, m, n, false), mat(&mut rng, m, n, false)],
            ),
            (
                "add_row",
                Box::new(|t, v| {
                    let y = t.add(v[0], v[1])?;
                    t.sq_l2(y)
                }),
                vec![mat(&mut rng, m, n, false), Tensor::vector(draw(&mut rng, n, false)).with_grad()],
            ),
            (
                "sub",
                Box::new(|t, v| {
                    let y = t.sub(v[0], v[1])?;
                    t.sq_l2(y)
                }),
                vec![mat(&mut rng, m, n, false), mat(&mut rng, m, n, false)],
            ),
            (
                "mul",
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    t.sum(y)
                }),
                vec![mat(&mut rng, m, n, false), mat(&mut rng, m, n, false)],
            ),
            (
                "mul_scalar",
                Box::new(|t, v| {
                    let y = t.mul(v[0], v[1])?;
                    t.sum(y)
                }),
                vec![mat(&mut rng, m, n, false), Tensor::scalar(rng.uniform_in(-2.0, 2.0)).with_grad()],
            ),
            (
                "matmul",
                Box::new(|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    t.sq_l2(y)
                }),
                vec![mat(&mut rng, m, k, false), mat(&mut rng, k, n, false)],
            ),
            ("tanh", unary(w_full.clone(), Tape::tanh), vec![mat(&mut rng, m, n, false)]),
            ("relu", unary(w_full.clone(), Tape::relu), vec![mat(&mut rng, m, n, true)]),
            ("softmax", unary(w_full.clone(), Tape::softmax), vec![mat(&mut rng, m, n, false)]),
            ("log_softmax", unary(w_full.clone(), Tape::log_softmax), vec![mat(&mut rng, m, n, false)]),
            (
                "cross_entropy",
                Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
                vec![mat(&mut rng, m, n, false)],
            ),
            ("mean", Box::new(|t, v| t.mean(v[0])), vec![mat(&mut rng, m, n, false)]),
            ("sum", Box::new(|t, v| t.sum(v[0])), vec![mat(&mut rng, m, n, false)]),
            (
                "scale",
                Box::new(move |t, v| {
                    let y = t.scale(v[0], c)?;
                    t.sq_l2(y)
                }),
                vec![mat(&mut rng, m, n, false)],
            ),
            ("sq_l2", Box::new(|t, v| t.sq_l2(v[0])), vec![mat(&mut rng, m, n, false)]),
            (
                "concat_rows",
                {
                    let w = w_full.clone();
                    Box::new(move |t: &mut Tape, v: &[Var]| {
                        let y = t.concat(v[0], v[1], 0)?;
                        contract(t, y, &w)
                    })
                },
                vec![mat(&mut rng, 1, n, false), mat(&mut rng, m - 1, n, false)],
            ),
            (
                "concat_cols",
                {
                    let w = w_full.clone();
                    Box::new(move |t: &mut Tape, v: &[Var]| {
                        let y = t.concat(v[0], v[1], 1)?;
                        contract(t, y, &w)
                    })
                },
                vec![mat(&mut rng, m, 1, false), mat(&mut rng, m, n - 1, false)],
            ),
            (
                "slice",
                {
                    let w = w_sliced;
                    Box::new(move |t: &mut Tape, v: &[Var]| {
                        let y = t.slice(v[0], 0, 1, m - 1)?;
                        contract(t, y, &w)
                    })
                },
                vec![mat(&mut rng, m, n, false)],
            ),
            (
                "mask",
                {
                    let w = w_full.clone();
                    Box::new(move |t: &mut Tape, v: &[Var]| {
                        let y = t.mask(v[0], &mask)?;
                        contract(t, y, &w)
                    })
                },
                vec![mat(&mut rng, m, n, false)],
            ),
        ];

        for (name, f, point) in cases {
            let err = grad_check(&point, GRAD_CHECK_H, f.as_ref())
                .map_err(|e| Error::artifact(format!("grad sweep `{name}`: {e}")))?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
