//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Values live in one flat arena so that building a graph is cheap: each
//! node records its operation, its shape and the offset of its value. The
//! tape is eager, so a value is available as soon as the node is pushed.
//! [`Tape::backward`] walks the nodes in reverse and accumulates adjoints.
//!
//! ```
//! use stlcluster::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.input("x", Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.scalar(y), 9.0);
//! assert_eq!(tape.grad(x), &[6.0]);
//! ```
//!
//! Shapes are restricted to scalars, vectors and row-major matrices, which
//! is all the policy and classifier networks need.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("backward needs a scalar output but node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },
    #[error("no input named `{0}` on the tape")]
    UnknownInput(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("empty argument list for {0}")]
    EmptyArgs(&'static str),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("non-finite gradient for parameter `{key}`")]
    NonFiniteGradient { key: String },
    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor of rank 0, 1 or 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.len() > 2 || expected != data.len() {
            return Err(AutodiffError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Checks the internal length invariant; useful after deserialization.
    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.shape.iter().product();
        if self.shape.len() > 2 || expected != self.data.len() {
            return Err(AutodiffError::BadTensor {
                shape: self.shape.clone(),
                len: self.data.len(),
            });
        }
        Ok(())
    }

    fn dims(&self) -> Shape {
        match self.shape.as_slice() {
            [] => Shape::Scalar,
            [n] => Shape::Vector(*n),
            [r, c] => Shape::Matrix(*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    fn to_vec(self) -> Vec<usize> {
        match self {
            Shape::Scalar => Vec::new(),
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct Args {
    start: u32,
    len: u32,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine {
        a: NodeId,
        scale: f64,
    },
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    MatVec(NodeId, NodeId),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Norm(NodeId),
    LogSumExp(NodeId),
    Index {
        a: NodeId,
        i: usize,
        scale: f64,
    },
    Slice {
        a: NodeId,
        start: usize,
    },
    Concat(Args),
    SoftMax {
        args: Args,
        beta: f64,
    },
    SoftMin {
        args: Args,
        beta: f64,
    },
    MaxExact(Args),
    MinExact(Args),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    start: usize,
}

/// Statistics reported by [`Tape::backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Number of nodes whose adjoint was propagated.
    pub visited: usize,
    /// Tape length at the time of the call.
    pub tape_len: usize,
}

/// Append-only computation record. Not `Sync`-shared mid-pass; independent
/// tapes can run on independent threads.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    args: Vec<NodeId>,
    adj: Vec<f64>,
    touched: Vec<bool>,
    names: BTreeMap<String, NodeId>,
    scratch: Vec<f64>,
}

/// Position on a tape that [`Tape::truncate`] can roll back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Checkpoint {
    nodes: usize,
    vals: usize,
    args: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            nodes: self.nodes.len(),
            vals: self.vals.len(),
            args: self.args.len(),
        }
    }

    /// Drops every node pushed after `cp`. Named inputs created after the
    /// checkpoint are forgotten too.
    pub fn truncate(&mut self, cp: Checkpoint) {
        self.nodes.truncate(cp.nodes);
        self.vals.truncate(cp.vals);
        self.args.truncate(cp.args);
        let limit = cp.nodes;
        self.names.retain(|_, id| id.index() < limit);
    }

    /// Adds a named leaf whose gradient is reported by [`Tape::gradients`].
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.names.insert(name.into(), id);
        id
    }

    /// Adds an anonymous leaf (constants and intermediate inputs).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let shape = value.dims();
        let start = self.vals.len();
        self.vals.extend_from_slice(&value.data);
        self.nodes.push(Node {
            op: Op::Leaf,
            shape,
            start,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn constant_vector(&mut self, v: &[f64]) -> NodeId {
        self.leaf(Tensor::vector(v.to_vec()))
    }

    pub fn named(&self, name: &str) -> Result<NodeId> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| AutodiffError::UnknownInput(name.to_string()))
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.index()];
        &self.vals[n.start..n.start + n.shape.len()]
    }

    /// First entry of a node's value; the whole value for scalars.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.vals[self.nodes[id.index()].start]
    }

    pub fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes[id.index()].shape.to_vec()
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor {
            shape: self.shape(id),
            data: self.value(id).to_vec(),
        }
    }

    fn dims(&self, id: NodeId) -> Shape {
        self.nodes[id.index()].shape
    }

    fn range(&self, id: NodeId) -> std::ops::Range<usize> {
        let n = &self.nodes[id.index()];
        n.start..n.start + n.shape.len()
    }

    fn mismatch(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn push_with(
        &mut self,
        op: Op,
        shape: Shape,
        f: impl FnOnce(&[f64], &mut Vec<f64>),
    ) -> NodeId {
        let mut out = std::mem::take(&mut self.scratch);
        out.clear();
        f(&self.vals, &mut out);
        debug_assert_eq!(out.len(), shape.len());
        let start = self.vals.len();
        self.vals.extend_from_slice(&out);
        self.scratch = out;
        self.nodes.push(Node { op, shape, start });
        NodeId(self.nodes.len() as u32 - 1)
    }

    fn push_args(&mut self, ids: &[NodeId]) -> Args {
        let start = self.args.len() as u32;
        self.args.extend_from_slice(ids);
        Args {
            start,
            len: ids.len() as u32,
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Shape> {
        let (sa, sb) = (self.dims(a), self.dims(b));
        if sa != sb {
            return Err(self.mismatch(
                op,
                format!("operands have shapes {:?} and {:?}", sa.to_vec(), sb.to_vec()),
            ));
        }
        Ok(sa)
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let shape = self.same_shape(name, a, b)?;
        let (ra, rb) = (self.range(a), self.range(b));
        Ok(self.push_with(op, shape, |v, out| {
            out.extend(v[ra].iter().zip(&v[rb]).map(|(&x, &y)| f(x, y)))
        }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let shape = self.dims(a);
        let ra = self.range(a);
        self.push_with(Op::Affine { a, scale }, shape, |v, out| {
            out.extend(v[ra].iter().map(|&x| scale * x + shift))
        })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.affine(a, 1.0, c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -1.0, 0.0)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: fn(f64) -> f64) -> NodeId {
        let shape = self.dims(a);
        let ra = self.range(a);
        self.push_with(op, shape, |v, out| out.extend(v[ra].iter().map(|&x| f(x))))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    /// `max(x, 0)` with derivative 0 at the kink.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid(a), a, |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sin(a), a, f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Cos(a), a, f64::cos)
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sqrt(a), a, f64::sqrt)
    }

    /// Matrix-vector product `m · x`.
    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = match self.dims(m) {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(self.mismatch("matvec", format!("left operand {:?} is not a matrix", s.to_vec())))
            }
        };
        if self.dims(x) != Shape::Vector(cols) {
            return Err(self.mismatch(
                "matvec",
                format!("matrix [{rows}, {cols}] times {:?}", self.dims(x).to_vec()),
            ));
        }
        let (rm, rx) = (self.range(m), self.range(x));
        Ok(self.push_with(Op::MatVec(m, x), Shape::Vector(rows), |v, out| {
            let mat = &v[rm];
            let vec = &v[rx];
            out.extend(mat.chunks_exact(cols).map(|row| {
                row.iter().zip(vec).map(|(a, b)| a * b).sum::<f64>()
            }))
        }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let ra = self.range(a);
        self.push_with(Op::Sum(a), Shape::Scalar, |v, out| out.push(v[ra].iter().sum()))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("dot", a, b)?;
        let (ra, rb) = (self.range(a), self.range(b));
        Ok(self.push_with(Op::Dot(a, b), Shape::Scalar, |v, out| {
            out.push(v[ra].iter().zip(&v[rb]).map(|(x, y)| x * y).sum())
        }))
    }

    /// Euclidean norm; the subgradient at the origin is zero.
    pub fn norm(&mut self, a: NodeId) -> NodeId {
        let ra = self.range(a);
        self.push_with(Op::Norm(a), Shape::Scalar, |v, out| {
            out.push(v[ra].iter().map(|x| x * x).sum::<f64>().sqrt())
        })
    }

    /// `log Σ exp(aᵢ)` over all entries of `a`, shifted for overflow safety.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let ra = self.range(a);
        self.push_with(Op::LogSumExp(a), Shape::Scalar, |v, out| {
            let xs = &v[ra];
            let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
            out.push(m + s.ln())
        })
    }

    /// Extracts entry `i` of `a` as a scalar.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        self.index_affine(a, i, 1.0, 0.0)
    }

    /// `scale * a[i] + shift` as a single node.
    pub fn index_affine(&mut self, a: NodeId, i: usize, scale: f64, shift: f64) -> Result<NodeId> {
        let len = self.dims(a).len();
        if i >= len {
            return Err(self.mismatch("index", format!("index {i} out of bounds for length {len}")));
        }
        let at = self.range(a).start + i;
        Ok(self.push_with(Op::Index { a, i, scale }, Shape::Scalar, |v, out| {
            out.push(scale * v[at] + shift)
        }))
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let total = self.dims(a).len();
        if start + len > total || len == 0 {
            return Err(self.mismatch(
                "slice",
                format!("range {start}..{} out of bounds for length {total}", start + len),
            ));
        }
        let from = self.range(a).start + start;
        Ok(self.push_with(Op::Slice { a, start }, Shape::Vector(len), |v, out| {
            out.extend_from_slice(&v[from..from + len])
        }))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyArgs("concat"));
        }
        for &p in parts {
            if let Shape::Matrix(..) = self.dims(p) {
                return Err(self.mismatch("concat", "matrix operand".to_string()));
            }
        }
        let total = parts.iter().map(|&p| self.dims(p).len()).sum();
        let ranges: Vec<_> = parts.iter().map(|&p| self.range(p)).collect();
        let args = self.push_args(parts);
        Ok(self.push_with(Op::Concat(args), Shape::Vector(total), |v, out| {
            for r in ranges {
                out.extend_from_slice(&v[r]);
            }
        }))
    }

    fn scalar_args(&self, op: &'static str, ids: &[NodeId]) -> Result<()> {
        if ids.is_empty() {
            return Err(AutodiffError::EmptyArgs(op));
        }
        if let Some(&bad) = ids.iter().find(|&&i| self.dims(i) != Shape::Scalar) {
            return Err(self.mismatch(
                op,
                format!("argument node {} is not a scalar", bad.index()),
            ));
        }
        Ok(())
    }

    /// Smooth maximum `(1/β) log Σ exp(β aᵢ)` over scalar nodes.
    pub fn softmax(&mut self, ids: &[NodeId], beta: f64) -> Result<NodeId> {
        if !(beta > 0.0) {
            return Err(AutodiffError::InvalidTemperature(beta));
        }
        self.scalar_args("softmax", ids)?;
        let at: Vec<usize> = ids.iter().map(|&i| self.range(i).start).collect();
        let args = self.push_args(ids);
        Ok(self.push_with(Op::SoftMax { args, beta }, Shape::Scalar, |v, out| {
            let m = at.iter().map(|&k| v[k]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = at.iter().map(|&k| (beta * (v[k] - m)).exp()).sum();
            out.push(m + s.ln() / beta)
        }))
    }

    /// Smooth minimum `-(1/β) log Σ exp(-β aᵢ)` over scalar nodes.
    pub fn softmin(&mut self, ids: &[NodeId], beta: f64) -> Result<NodeId> {
        if !(beta > 0.0) {
            return Err(AutodiffError::InvalidTemperature(beta));
        }
        self.scalar_args("softmin", ids)?;
        let at: Vec<usize> = ids.iter().map(|&i| self.range(i).start).collect();
        let args = self.push_args(ids);
        Ok(self.push_with(Op::SoftMin { args, beta }, Shape::Scalar, |v, out| {
            let m = at.iter().map(|&k| v[k]).fold(f64::INFINITY, f64::min);
            let s: f64 = at.iter().map(|&k| (-beta * (v[k] - m)).exp()).sum();
            out.push(m - s.ln() / beta)
        }))
    }

    /// Exact maximum. Not differentiable at ties: the subgradient goes to
    /// the lowest-index maximiser.
    pub fn max_exact(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        self.scalar_args("max", ids)?;
        let at: Vec<usize> = ids.iter().map(|&i| self.range(i).start).collect();
        let args = self.push_args(ids);
        Ok(self.push_with(Op::MaxExact(args), Shape::Scalar, |v, out| {
            out.push(at.iter().map(|&k| v[k]).fold(f64::NEG_INFINITY, f64::max))
        }))
    }

    /// Exact minimum with lowest-index subgradient at ties.
    pub fn min_exact(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        self.scalar_args("min", ids)?;
        let at: Vec<usize> = ids.iter().map(|&i| self.range(i).start).collect();
        let args = self.push_args(ids);
        Ok(self.push_with(Op::MinExact(args), Shape::Scalar, |v, out| {
            out.push(at.iter().map(|&k| v[k]).fold(f64::INFINITY, f64::min))
        }))
    }

    /// Propagates adjoints from the scalar `output` back to every node.
    /// Adjoints of earlier calls are discarded.
    pub fn backward(&mut self, output: NodeId) -> Result<BackwardStats> {
        let out_shape = self.dims(output);
        if out_shape != Shape::Scalar {
            return Err(AutodiffError::NonScalarOutput {
                node: output.index(),
                shape: out_shape.to_vec(),
            });
        }
        let Tape {
            nodes,
            vals,
            args,
            adj,
            touched,
            ..
        } = self;
        adj.clear();
        adj.resize(vals.len(), 0.0);
        touched.clear();
        touched.resize(nodes.len(), false);

        adj[nodes[output.index()].start] = 1.0;
        touched[output.index()] = true;
        let mut visited = 0;

        let range = |id: NodeId| {
            let n = &nodes[id.index()];
            n.start..n.start + n.shape.len()
        };

        for idx in (0..=output.index()).rev() {
            if !touched[idx] {
                continue;
            }
            visited += 1;
            let node = &nodes[idx];
            let len = node.shape.len();
            let (lo, hi) = adj.split_at_mut(node.start);
            let g = &hi[..len];
            let y = &vals[node.start..node.start + len];
            let mut mark = |id: NodeId| touched[id.index()] = true;

            match node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (d, gi) in lo[range(a)].iter_mut().zip(g) {
                        *d += gi;
                    }
                    for (d, gi) in lo[range(b)].iter_mut().zip(g) {
                        *d += gi;
                    }
                    mark(a);
                    mark(b);
                }
                Op::Sub(a, b) => {
                    for (d, gi) in lo[range(a)].iter_mut().zip(g) {
                        *d += gi;
                    }
                    for (d, gi) in lo[range(b)].iter_mut().zip(g) {
                        *d -= gi;
                    }
                    mark(a);
                    mark(b);
                }
                Op::Mul(a, b) => {
                    let (ra, rb) = (range(a), range(b));
                    for k in 0..len {
                        let (xa, xb) = (vals[ra.start + k], vals[rb.start + k]);
                        lo[ra.start + k] += g[k] * xb;
                        lo[rb.start + k] += g[k] * xa;
                    }
                    mark(a);
                    mark(b);
                }
                Op::Affine { a, scale } => {
                    for (d, gi) in lo[range(a)].iter_mut().zip(g) {
                        *d += scale * gi;
                    }
                    mark(a);
                }
                Op::Tanh(a) => {
                    for ((d, gi), yi) in lo[range(a)].iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                    mark(a);
                }
                Op::Relu(a) => {
                    for ((d, gi), yi) in lo[range(a)].iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                    mark(a);
                }
                Op::Sigmoid(a) => {
                    for ((d, gi), yi) in lo[range(a)].iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                    mark(a);
                }
                Op::Exp(a) => {
                    for ((d, gi), yi) in lo[range(a)].iter_mut().zip(g).zip(y) {
                        *d += gi * yi;
                    }
                    mark(a);
                }
                Op::Ln(a) => {
                    let ra = range(a);
                    for k in 0..len {
                        lo[ra.start + k] += g[k] / vals[ra.start + k];
                    }
                    mark(a);
                }
                Op::Sin(a) => {
                    let ra = range(a);
                    for k in 0..len {
                        lo[ra.start + k] += g[k] * vals[ra.start + k].cos();
                    }
                    mark(a);
                }
                Op::Cos(a) => {
                    let ra = range(a);
                    for k in 0..len {
                        lo[ra.start + k] -= g[k] * vals[ra.start + k].sin();
                    }
                    mark(a);
                }
                Op::Sqrt(a) => {
                    for ((d, gi), yi) in lo[range(a)].iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi / (2.0 * yi);
                        }
                    }
                    mark(a);
                }
                Op::MatVec(m, x) => {
                    let (rm, rx) = (range(m), range(x));
                    let cols = rx.len();
                    for (r, &gr) in g.iter().enumerate() {
                        if gr == 0.0 {
                            continue;
                        }
                        let row = rm.start + r * cols;
                        for c in 0..cols {
                            lo[row + c] += gr * vals[rx.start + c];
                            lo[rx.start + c] += gr * vals[row + c];
                        }
                    }
                    mark(m);
                    mark(x);
                }
                Op::Sum(a) => {
                    for d in lo[range(a)].iter_mut() {
                        *d += g[0];
                    }
                    mark(a);
                }
                Op::Dot(a, b) => {
                    let (ra, rb) = (range(a), range(b));
                    for k in 0..ra.len() {
                        let (xa, xb) = (vals[ra.start + k], vals[rb.start + k]);
                        lo[ra.start + k] += g[0] * xb;
                        lo[rb.start + k] += g[0] * xa;
                    }
                    mark(a);
                    mark(b);
                }
                Op::Norm(a) => {
                    if y[0] > 0.0 {
                        let ra = range(a);
                        for k in ra.clone() {
                            lo[k] += g[0] * vals[k] / y[0];
                        }
                    }
                    mark(a);
                }
                Op::LogSumExp(a) => {
                    let ra = range(a);
                    for k in ra {
                        lo[k] += g[0] * (vals[k] - y[0]).exp();
                    }
                    mark(a);
                }
                Op::Index { a, i, scale } => {
                    lo[range(a).start + i] += scale * g[0];
                    mark(a);
                }
                Op::Slice { a, start } => {
                    let from = range(a).start + start;
                    for (d, gi) in lo[from..from + len].iter_mut().zip(g) {
                        *d += gi;
                    }
                    mark(a);
                }
                Op::Concat(list) => {
                    let mut off = 0;
                    for &p in &args[list.start as usize..(list.start + list.len) as usize] {
                        let rp = range(p);
                        let n = rp.len();
                        for (d, gi) in lo[rp].iter_mut().zip(&g[off..off + n]) {
                            *d += gi;
                        }
                        off += n;
                        mark(p);
                    }
                }
                Op::SoftMax { args: list, beta } => {
                    // weights exp(β(aᵢ - y)) sum to one
                    for &p in &args[list.start as usize..(list.start + list.len) as usize] {
                        let k = range(p).start;
                        lo[k] += g[0] * (beta * (vals[k] - y[0])).exp();
                        mark(p);
                    }
                }
                Op::SoftMin { args: list, beta } => {
                    for &p in &args[list.start as usize..(list.start + list.len) as usize] {
                        let k = range(p).start;
                        lo[k] += g[0] * (-beta * (vals[k] - y[0])).exp();
                        mark(p);
                    }
                }
                Op::MaxExact(list) | Op::MinExact(list) => {
                    let ids = &args[list.start as usize..(list.start + list.len) as usize];
                    if let Some(&p) = ids.iter().find(|&&p| vals[range(p).start] == y[0]) {
                        lo[range(p).start] += g[0];
                        mark(p);
                    }
                }
            }
        }
        Ok(BackwardStats {
            visited,
            tape_len: nodes.len(),
        })
    }

    /// Adjoint of `id` after the last [`Tape::backward`]. Nodes the output
    /// does not depend on report zeros.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        let r = self.range(id);
        if self.adj.len() < r.end {
            return &[];
        }
        &self.adj[r]
    }

    /// Gradients of every named input, keyed by name.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(name, &id)| {
                let data = if self.adj.len() >= self.range(id).end {
                    self.grad(id).to_vec()
                } else {
                    vec![0.0; self.dims(id).len()]
                };
                (
                    name.clone(),
                    Tensor {
                        shape: self.shape(id),
                        data,
                    },
                )
            })
            .collect()
    }
}

/// Builds a graph from named inputs and evaluates it.
///
/// `expr` receives the tape and the node handle of each input.
pub fn forward<F>(inputs: &BTreeMap<String, Tensor>, expr: F) -> Result<(Tape, NodeId)>
where
    F: FnOnce(&mut Tape, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut handles = BTreeMap::new();
    for (name, value) in inputs {
        value.validate()?;
        handles.insert(name.clone(), tape.input(name.clone(), value.clone()));
    }
    let out = expr(&mut tape, &handles)?;
    Ok((tape, out))
}

pub type ParamMap = BTreeMap<String, Tensor>;

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_global_norm(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over a [`ParamMap`]: plain gradient descent or
/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, key: &str) -> Option<&[f64]> {
        self.first.get(key).map(Vec::as_slice)
    }

    /// Applies one update. Nothing is modified if any gradient is missing,
    /// misshapen or non-finite.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) -> Result<()> {
        for (key, p) in params.iter() {
            let g = grads
                .get(key)
                .ok_or_else(|| AutodiffError::MissingGradient(key.clone()))?;
            if g.shape != p.shape {
                return Err(AutodiffError::ShapeMismatch {
                    node: 0,
                    op: "optimizer",
                    detail: format!("parameter `{key}` {:?} vs gradient {:?}", p.shape, g.shape),
                });
            }
            if g.data.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient { key: key.clone() });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (key, p) in params.iter_mut() {
                    for (w, g) in p.data.iter_mut().zip(&grads[key].data) {
                        *w -= self.lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for (key, p) in params.iter_mut() {
                    let g = &grads[key].data;
                    let m = self
                        .first
                        .entry(key.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .second
                        .entry(key.clone())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for k in 0..g.len() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        p.data[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
