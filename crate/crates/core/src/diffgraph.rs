//! A small reverse-mode differentiable computation graph.
//!
//! Graphs are built once from a closed set of primitives over row-major 2-D
//! arrays. The row axis is the batch axis and may be left free ([`Rows::Batch`]);
//! the column axis is always fixed, so every shape error is reported by the
//! [`GraphBuilder`] rather than during evaluation.
//!
//! Evaluation produces a [`Tape`] holding every intermediate value. A graph is
//! immutable after building and can be evaluated from several threads at once;
//! parameter values live in a separate [`ParamStore`].

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch at node `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("non-finite value produced by node `{node}`")]
    NonFinite { node: String },
    #[error("expected {expected} inputs, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("backward called without a forward tape for this graph")]
    NoForward,
    #[error("node `{node}` is not a scalar output")]
    NotScalar { node: String },
    #[error("unknown node or parameter id {0}")]
    UnknownId(usize),
}

/// Row-major dense matrix of 64-bit reals.
#[derive(Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Dense {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dense({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Dense::from_vec length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn column(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Dense) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Dense {
        Dense { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays with a gradient accumulator of identical shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Dense) -> ParamId {
        let id = ParamId(self.entries.len());
        let grad = vec![0.0; value.data.len()];
        self.entries.push(ParamEntry {
            name: name.into(),
            rows: value.rows,
            cols: value.cols,
            value: value.data,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        let e = &self.entries[id.0];
        (e.rows, e.cols)
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].grad
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Iterates `(value, grad)` slices for every array in declaration order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&mut [f64], &mut [f64])> {
        self.entries.iter_mut().map(|e| (e.value.as_mut_slice(), e.grad.as_mut_slice()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.entries.iter().map(|e| (e.name.as_str(), e.value.as_slice(), e.grad.as_slice()))
    }

    /// All parameter values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.iter().copied()).collect()
    }

    /// All gradients concatenated in declaration order.
    pub fn flatten_grad(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.grad.iter().copied()).collect()
    }

    /// Overwrites all values from a flat slice. Panics on length mismatch.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count(), "flat parameter length mismatch");
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Row extent of a node's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rows {
    Batch,
    Fixed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: Rows,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    RowSoftmax(NodeId),
    Concat(NodeId, NodeId),
    Slice { src: NodeId, start: usize, len: usize },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    op: Op,
    shape: Shape,
}

/// Immutable computation graph. Nodes are stored in topological order.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

pub struct GraphBuilder<'a> {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    params: &'a ParamStore,
}

impl<'a> GraphBuilder<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { nodes: Vec::new(), inputs: Vec::new(), outputs: Vec::new(), params }
    }

    fn push(&mut self, name: &str, op: Op, shape: Shape) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { name: name.to_string(), op, shape });
        id
    }

    fn shape_of(&self, id: NodeId) -> Result<Shape, GraphError> {
        self.nodes.get(id.0).map(|n| n.shape).ok_or(GraphError::UnknownId(id.0))
    }

    fn shape_err(name: &str, detail: String) -> GraphError {
        GraphError::Shape { node: name.to_string(), detail }
    }

    /// Batch input with `cols` features.
    pub fn input(&mut self, name: &str, cols: usize) -> NodeId {
        let id = self.push(name, Op::Input, Shape { rows: Rows::Batch, cols });
        self.inputs.push(id);
        id
    }

    pub fn param(&mut self, id: ParamId) -> Result<NodeId, GraphError> {
        if id.0 >= self.params.len() {
            return Err(GraphError::UnknownId(id.0));
        }
        let (r, c) = self.params.shape(id);
        let name = self.params.name(id).to_string();
        Ok(self.push(&name, Op::Param(id), Shape { rows: Rows::Fixed(r), cols: c }))
    }

    pub fn matmul(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sb.rows != Rows::Fixed(sa.cols) {
            return Err(Self::shape_err(
                name,
                alloc::format!("matmul inner dimension {} vs right rows {:?}", sa.cols, sb.rows),
            ));
        }
        Ok(self.push(name, Op::MatMul(a, b), Shape { rows: sa.rows, cols: sb.cols }))
    }

    pub fn bias_add(&mut self, name: &str, a: NodeId, bias: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(bias)?;
        if sb.rows != Rows::Fixed(1) || sb.cols != sa.cols {
            return Err(Self::shape_err(
                name,
                alloc::format!("bias must be 1x{}, got {:?}x{}", sa.cols, sb.rows, sb.cols),
            ));
        }
        Ok(self.push(name, Op::BiasAdd(a, bias), sa))
    }

    pub fn unary(&mut self, name: &str, op: UnaryOp, a: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a)?;
        Ok(self.push(name, Op::Unary(op, a), sa))
    }

    pub fn relu(&mut self, name: &str, a: NodeId) -> Result<NodeId, GraphError> {
        self.unary(name, UnaryOp::Relu, a)
    }

    pub fn binary(&mut self, name: &str, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa != sb {
            return Err(Self::shape_err(name, alloc::format!("operands {:?} and {:?}", sa, sb)));
        }
        Ok(self.push(name, Op::Binary(op, a, b), sa))
    }

    pub fn row_softmax(&mut self, name: &str, a: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a)?;
        Ok(self.push(name, Op::RowSoftmax(a), sa))
    }

    pub fn concat(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa.rows != sb.rows {
            return Err(Self::shape_err(name, alloc::format!("row extents {:?} and {:?}", sa.rows, sb.rows)));
        }
        Ok(self.push(name, Op::Concat(a, b), Shape { rows: sa.rows, cols: sa.cols + sb.cols }))
    }

    pub fn slice(&mut self, name: &str, src: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let s = self.shape_of(src)?;
        if len == 0 || start + len > s.cols {
            return Err(Self::shape_err(
                name,
                alloc::format!("slice {}..{} out of {} columns", start, start + len, s.cols),
            ));
        }
        Ok(self.push(name, Op::Slice { src, start, len }, Shape { rows: s.rows, cols: len }))
    }

    pub fn sum(&mut self, name: &str, a: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(a)?;
        Ok(self.push(name, Op::Sum(a), Shape { rows: Rows::Fixed(1), cols: 1 }))
    }

    pub fn mean(&mut self, name: &str, a: NodeId) -> Result<NodeId, GraphError> {
        self.shape_of(a)?;
        Ok(self.push(name, Op::Mean(a), Shape { rows: Rows::Fixed(1), cols: 1 }))
    }

    pub fn mark_output(&mut self, id: NodeId) -> Result<(), GraphError> {
        self.shape_of(id)?;
        self.outputs.push(id);
        Ok(())
    }

    pub fn build(self) -> Graph {
        Graph { nodes: self.nodes, inputs: self.inputs, outputs: self.outputs }
    }
}

/// Values of every node from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Dense>,
    batch: usize,
    node_count: usize,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> &Dense {
        &self.values[id.0]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie fully inside the given
    // slices (checked by the callers' shape bookkeeping) and `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    /// Parameters referenced by this graph.
    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Param(p) => Some(p),
            _ => None,
        })
    }

    /// Evaluates every node. `inputs` are given in declaration order.
    pub fn forward_eval(&self, params: &ParamStore, inputs: &[&Dense]) -> Result<Tape, GraphError> {
        if inputs.len() != self.inputs.len() {
            return Err(GraphError::InputCount { expected: self.inputs.len(), got: inputs.len() });
        }
        let batch = inputs.first().map(|d| d.rows).unwrap_or(1);
        let mut values: Vec<Dense> = Vec::with_capacity(self.nodes.len());
        let mut next_input = 0;
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input => {
                    let d = inputs[next_input];
                    next_input += 1;
                    if d.cols != node.shape.cols || d.rows != batch {
                        return Err(GraphError::Shape {
                            node: node.name.clone(),
                            detail: alloc::format!(
                                "input is {}x{}, declared {}x{}",
                                d.rows,
                                d.cols,
                                batch,
                                node.shape.cols
                            ),
                        });
                    }
                    d.clone()
                }
                Op::Param(p) => {
                    let (r, c) = params.shape(*p);
                    Dense::from_vec(r, c, params.value(*p).to_vec())
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    let mut out = Dense::zeros(a.rows, b.cols);
                    gemm(
                        a.rows,
                        a.cols,
                        b.cols,
                        &a.data,
                        (a.cols as isize, 1),
                        &b.data,
                        (b.cols as isize, 1),
                        0.0,
                        &mut out.data,
                    );
                    out
                }
                Op::BiasAdd(a, bias) => {
                    let mut out = values[a.0].clone();
                    let bias = &values[bias.0].data;
                    for row in out.data.chunks_exact_mut(out.cols) {
                        for (x, b) in row.iter_mut().zip(bias) {
                            *x += b;
                        }
                    }
                    out
                }
                Op::Unary(op, a) => {
                    let a = &values[a.0];
                    match op {
                        UnaryOp::Relu => a.map(|x| if x > 0.0 { x } else { 0.0 }),
                        UnaryOp::Exp => a.map(math::exp),
                        UnaryOp::Log => a.map(math::ln),
                        UnaryOp::Sigmoid => a.map(math::sigmoid),
                        UnaryOp::Softplus => a.map(math::softplus),
                        UnaryOp::Tanh => a.map(math::tanh),
                    }
                }
                Op::Binary(op, a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    let f: fn(f64, f64) -> f64 = match op {
                        BinaryOp::Add => |x, y| x + y,
                        BinaryOp::Sub => |x, y| x - y,
                        BinaryOp::Mul => |x, y| x * y,
                        BinaryOp::Div => |x, y| x / y,
                    };
                    Dense {
                        rows: a.rows,
                        cols: a.cols,
                        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                    }
                }
                Op::RowSoftmax(a) => {
                    let mut out = values[a.0].clone();
                    for row in out.data.chunks_exact_mut(out.cols) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut total = 0.0;
                        for x in row.iter_mut() {
                            *x = math::exp(*x - max);
                            total += *x;
                        }
                        for x in row.iter_mut() {
                            *x /= total;
                        }
                    }
                    out
                }
                Op::Concat(a, b) => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    let cols = a.cols + b.cols;
                    let mut data = Vec::with_capacity(a.rows * cols);
                    for r in 0..a.rows {
                        data.extend_from_slice(a.row(r));
                        data.extend_from_slice(b.row(r));
                    }
                    Dense { rows: a.rows, cols, data }
                }
                Op::Slice { src, start, len } => {
                    let s = &values[src.0];
                    let mut data = Vec::with_capacity(s.rows * len);
                    for r in 0..s.rows {
                        data.extend_from_slice(&s.row(r)[*start..start + len]);
                    }
                    Dense { rows: s.rows, cols: *len, data }
                }
                Op::Sum(a) => {
                    let mut acc = 0.0;
                    for &x in &values[a.0].data {
                        acc += x;
                    }
                    Dense::scalar(acc)
                }
                Op::Mean(a) => {
                    let a = &values[a.0];
                    let mut acc = 0.0;
                    for &x in &a.data {
                        acc += x;
                    }
                    Dense::scalar(acc / a.data.len() as f64)
                }
            };
            if v.data.iter().any(|x| !x.is_finite()) {
                return Err(GraphError::NonFinite { node: node.name.clone() });
            }
            values.push(v);
        }
        Ok(Tape { values, batch, node_count: self.nodes.len() })
    }

    /// Reverse pass from a scalar node. Parameter gradients are overwritten
    /// (zeroed first) unless `accumulate` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        output: NodeId,
        params: &mut ParamStore,
        accumulate: bool,
    ) -> Result<Vec<Dense>, GraphError> {
        if tape.node_count != self.nodes.len() {
            return Err(GraphError::NoForward);
        }
        let node = self.nodes.get(output.0).ok_or(GraphError::UnknownId(output.0))?;
        if tape.values[output.0].data.len() != 1 {
            return Err(GraphError::NotScalar { node: node.name.clone() });
        }
        let seed = Dense::scalar(1.0);
        self.backward_seeded(tape, &[(output, &seed)], params, accumulate)
    }

    /// Reverse pass from arbitrary node cotangents. Returns the gradient with
    /// respect to each graph input, in declaration order.
    pub fn backward_seeded(
        &self,
        tape: &Tape,
        seeds: &[(NodeId, &Dense)],
        params: &mut ParamStore,
        accumulate: bool,
    ) -> Result<Vec<Dense>, GraphError> {
        if tape.node_count != self.nodes.len() {
            return Err(GraphError::NoForward);
        }
        if !accumulate {
            for p in self.params() {
                params.grad_mut(p).iter_mut().for_each(|g| *g = 0.0);
            }
        }
        let mut grads: Vec<Option<Dense>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            let v = tape.values.get(id.0).ok_or(GraphError::UnknownId(id.0))?;
            if v.rows != seed.rows || v.cols != seed.cols {
                return Err(GraphError::Shape {
                    node: self.nodes[id.0].name.clone(),
                    detail: alloc::format!(
                        "seed is {}x{}, node value is {}x{}",
                        seed.rows,
                        seed.cols,
                        v.rows,
                        v.cols
                    ),
                });
            }
            accumulate_into(&mut grads[id.0], (*seed).clone());
        }

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let values = &tape.values;
            match &self.nodes[idx].op {
                Op::Input => grads[idx] = Some(g),
                Op::Param(p) => {
                    for (acc, x) in params.grad_mut(*p).iter_mut().zip(&g.data) {
                        *acc += x;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    // dA = G B^T
                    let mut ga = Dense::zeros(av.rows, av.cols);
                    gemm(
                        g.rows,
                        g.cols,
                        av.cols,
                        &g.data,
                        (g.cols as isize, 1),
                        &bv.data,
                        (1, bv.cols as isize),
                        0.0,
                        &mut ga.data,
                    );
                    // dB = A^T G
                    let mut gb = Dense::zeros(bv.rows, bv.cols);
                    gemm(
                        av.cols,
                        av.rows,
                        g.cols,
                        &av.data,
                        (1, av.cols as isize),
                        &g.data,
                        (g.cols as isize, 1),
                        0.0,
                        &mut gb.data,
                    );
                    accumulate_into(&mut grads[a.0], ga);
                    accumulate_into(&mut grads[b.0], gb);
                }
                Op::BiasAdd(a, bias) => {
                    let mut gb = Dense::zeros(1, g.cols);
                    for row in g.data.chunks_exact(g.cols) {
                        for (acc, x) in gb.data.iter_mut().zip(row) {
                            *acc += x;
                        }
                    }
                    accumulate_into(&mut grads[bias.0], gb);
                    accumulate_into(&mut grads[a.0], g);
                }
                Op::Unary(op, a) => {
                    let x = &values[a.0].data;
                    let y = &values[idx].data;
                    let mut ga = g;
                    for ((gi, &xi), &yi) in ga.data.iter_mut().zip(x).zip(y) {
                        *gi *= match op {
                            UnaryOp::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Exp => yi,
                            UnaryOp::Log => 1.0 / xi,
                            UnaryOp::Sigmoid => yi * (1.0 - yi),
                            UnaryOp::Softplus => math::sigmoid(xi),
                            UnaryOp::Tanh => 1.0 - yi * yi,
                        };
                    }
                    accumulate_into(&mut grads[a.0], ga);
                }
                Op::Binary(op, a, b) => {
                    let (av, bv) = (&values[a.0].data, &values[b.0].data);
                    let mut ga = g.clone();
                    let mut gb = g;
                    for i in 0..ga.data.len() {
                        let gi = ga.data[i];
                        let (da, db) = match op {
                            BinaryOp::Add => (gi, gi),
                            BinaryOp::Sub => (gi, -gi),
                            BinaryOp::Mul => (gi * bv[i], gi * av[i]),
                            BinaryOp::Div => (gi / bv[i], -gi * av[i] / (bv[i] * bv[i])),
                        };
                        ga.data[i] = da;
                        gb.data[i] = db;
                    }
                    accumulate_into(&mut grads[a.0], ga);
                    accumulate_into(&mut grads[b.0], gb);
                }
                Op::RowSoftmax(a) => {
                    let y = &values[idx];
                    let mut ga = g;
                    let cols = y.cols;
                    for (grow, yrow) in ga.data.chunks_exact_mut(cols).zip(y.data.chunks_exact(cols)) {
                        let mut dot = 0.0;
                        for (gi, yi) in grow.iter().zip(yrow) {
                            dot += gi * yi;
                        }
                        for (gi, yi) in grow.iter_mut().zip(yrow) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    accumulate_into(&mut grads[a.0], ga);
                }
                Op::Concat(a, b) => {
                    let ac = values[a.0].cols;
                    let bc = values[b.0].cols;
                    let mut ga = Dense::zeros(g.rows, ac);
                    let mut gb = Dense::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        let row = g.row(r);
                        ga.row_mut(r).copy_from_slice(&row[..ac]);
                        gb.row_mut(r).copy_from_slice(&row[ac..]);
                    }
                    accumulate_into(&mut grads[a.0], ga);
                    accumulate_into(&mut grads[b.0], gb);
                }
                Op::Slice { src, start, len } => {
                    let s = &values[src.0];
                    let mut gs = Dense::zeros(s.rows, s.cols);
                    for r in 0..s.rows {
                        gs.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    accumulate_into(&mut grads[src.0], gs);
                }
                Op::Sum(a) => {
                    let s = &values[a.0];
                    accumulate_into(&mut grads[a.0], Dense::filled(s.rows, s.cols, g.data[0]));
                }
                Op::Mean(a) => {
                    let s = &values[a.0];
                    let n = s.data.len() as f64;
                    accumulate_into(&mut grads[a.0], Dense::filled(s.rows, s.cols, g.data[0] / n));
                }
            }
        }

        Ok(self
            .inputs
            .iter()
            .map(|id| {
                grads[id.0].take().unwrap_or_else(|| {
                    let v = &tape.values[id.0];
                    Dense::zeros(v.rows, v.cols)
                })
            })
            .collect())
    }

    /// Compares analytic parameter gradients of the scalar `output` against
    /// central differences with step `eps`. Returns the maximum relative error
    /// `|a - c| / max(|a|, |c|, 1e-12)` over every parameter entry.
    pub fn grad_check(
        &self,
        params: &mut ParamStore,
        inputs: &[&Dense],
        output: NodeId,
        eps: f64,
    ) -> Result<f64, GraphError> {
        let tape = self.forward_eval(params, inputs)?;
        self.backward(&tape, output, params, false)?;
        let ids: Vec<ParamId> = self.params().collect();
        let mut worst = 0.0f64;
        for id in ids {
            let n = params.value(id).len();
            for i in 0..n {
                let analytic = params.grad(id)[i];
                let orig = params.value(id)[i];
                params.value_mut(id)[i] = orig + eps;
                let up = self.forward_eval(params, inputs)?.value(output).data[0];
                params.value_mut(id)[i] = orig - eps;
                let down = self.forward_eval(params, inputs)?.value(output).data[0];
                params.value_mut(id)[i] = orig;
                let central = (up - down) / (2.0 * eps);
                let denom = analytic.abs().max(central.abs()).max(1e-12);
                worst = worst.max((analytic - central).abs() / denom);
            }
        }
        Ok(worst)
    }
}

fn accumulate_into(slot: &mut Option<Dense>, g: Dense) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
