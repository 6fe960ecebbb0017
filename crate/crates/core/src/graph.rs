//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only record of primitive operations. Building the
//! record performs shape inference and validation up front; [`Graph::evaluate`]
//! binds named inputs and replays the record, and [`Evaluation::backward`]
//! walks it in reverse to accumulate gradients. Records are immutable after
//! construction, so one graph can be evaluated from many threads; every
//! evaluation owns its buffers.
//!
//! The primitive set is deliberately small: what a two-layer LSTM, a softmax
//! language-model head, and a stretched-rectified mask objective need, and
//! nothing else. No fusion, no higher-order derivatives, no GPU.
//!
//! Gradient conventions:
//! - `clamp` passes gradient only strictly inside `(lo, hi)`; at and outside
//!   the boundaries the gradient is zero. Rectified mask samples must stop
//!   gradient once they hit a boundary, and the one-sided rule keeps the
//!   finite-difference oracle honest away from the kinks.
//! - `embed` scatter-adds into the table gradient.

use std::collections::HashMap;

use crate::array::RealArray;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Placeholder bound at evaluation time.
    Input { name: String },
    /// Values baked into the record.
    Constant { values: Vec<f64> },
    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// `c * x`, constant scale.
    Scale { x: NodeId, c: f64 },
    /// `x + c`, constant shift.
    Shift { x: NodeId, c: f64 },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Log { x: NodeId },
    Exp { x: NodeId },
    /// Row-wise softmax; a vector counts as one row.
    Softmax { x: NodeId },
    /// Row-wise log-softmax.
    LogSoftmax { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Rows of `table` ([v, d]) selected by fixed ids -> `[n, d]` (or `[d]` for one id).
    Embed { table: NodeId, ids: Vec<usize> },
    /// Single element of a vector -> scalar.
    Gather { x: NodeId, index: usize },
    /// Sum of all elements -> scalar.
    Sum { x: NodeId },
    /// Vectors of equal length -> matrix, one per row.
    Stack { items: Vec<NodeId> },
    /// Vectors (or scalars) -> one longer vector.
    Concat { items: Vec<NodeId> },
    /// Contiguous slice of a vector.
    Slice { x: NodeId, start: usize, len: usize },
}

/// An append-only record of primitive operations with inferred shapes.
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    inputs: Vec<(String, NodeId)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            shapes: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.ops.len()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.shapes.push(shape);
        id
    }

    fn mismatch(&self, op: &str, expected: &[usize], actual: &[usize]) -> Error {
        Error::ShapeMismatch {
            op: op.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Declare a named input with the shape it must be bound with.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            shape,
        );
        self.inputs.push((name.to_string(), id));
        id
    }

    /// Bake constant values into the record. Constants never receive gradient.
    pub fn constant(&mut self, array: RealArray) -> NodeId {
        let shape = array.shape().to_vec();
        self.push(
            Op::Constant {
                values: array.into_values(),
            },
            shape,
        )
    }

    /// Convenience: a scalar constant.
    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Constant { values: vec![v] }, vec![])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => vec![*m, *n],
            ([m, k1], [k2]) if k1 == k2 => vec![*m],
            _ => return Err(self.mismatch("matmul", &sa, &sb)),
        };
        Ok(self.push(Op::Matmul { a, b }, shape))
    }

    fn elementwise(&mut self, op_name: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op_name, self.shapes[a.0].clone().as_slice(), &self.shapes[b.0].clone()));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise("add", a, b)?;
        Ok(self.push(Op::Add { a, b }, shape))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise("sub", a, b)?;
        Ok(self.push(Op::Sub { a, b }, shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise("mul", a, b)?;
        Ok(self.push(Op::Mul { a, b }, shape))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise("div", a, b)?;
        Ok(self.push(Op::Div { a, b }, shape))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, shape)
    }

    pub fn shift(&mut self, x: NodeId, c: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Shift { x, c }, shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid { x }, shape)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Tanh { x }, shape)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Log { x }, shape)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Exp { x }, shape)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(self.mismatch("softmax", &[0], &shape));
        }
        Ok(self.push(Op::Softmax { x }, shape))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(self.mismatch("log_softmax", &[0], &shape));
        }
        Ok(self.push(Op::LogSoftmax { x }, shape))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Clamp { x, lo, hi }, shape)
    }

    /// Look up `ids` in an embedding table of shape `[v, d]`. A single id
    /// yields a `[d]` vector; several yield `[n, d]`.
    pub fn embed(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(self.mismatch("embed", &[0, 0], &ts));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(Error::UnknownToken(format!("embed id {bad} >= {}", ts[0])));
        }
        let shape = if ids.len() == 1 {
            vec![ts[1]]
        } else {
            vec![ids.len(), ts[1]]
        };
        Ok(self.push(Op::Embed { table, ids }, shape))
    }

    /// Select one element of a vector as a scalar.
    pub fn gather(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 1 || index >= shape[0] {
            return Err(self.mismatch("gather", &[index + 1], &shape));
        }
        Ok(self.push(Op::Gather { x, index }, vec![]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum { x }, vec![])
    }

    /// Stack equal-length vectors into a matrix, one vector per row.
    pub fn stack(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("stack of zero items".into()));
        }
        let first = self.shape(items[0]).to_vec();
        if first.len() != 1 {
            return Err(self.mismatch("stack", &[0], &first));
        }
        for &it in items {
            if self.shape(it) != first.as_slice() {
                return Err(self.mismatch("stack", &first, &self.shapes[it.0].clone()));
            }
        }
        Ok(self.push(
            Op::Stack {
                items: items.to_vec(),
            },
            vec![items.len(), first[0]],
        ))
    }

    /// Concatenate vectors (scalars count as length 1) into one vector.
    pub fn concat(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(Error::InvalidConfig("concat of zero items".into()));
        }
        let mut total = 0;
        for &it in items {
            let s = self.shape(it);
            match s.len() {
                0 => total += 1,
                1 => total += s[0],
                _ => return Err(self.mismatch("concat", &[0], &s.to_vec())),
            }
        }
        Ok(self.push(
            Op::Concat {
                items: items.to_vec(),
            },
            vec![total],
        ))
    }

    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || start + len > s[0] {
            return Err(self.mismatch("slice", &[start + len], &s));
        }
        Ok(self.push(Op::Slice { x, start, len }, vec![len]))
    }

    fn operands(&self, idx: usize) -> Vec<NodeId> {
        match &self.ops[idx] {
            Op::Input { .. } | Op::Constant { .. } => vec![],
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::Div { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Shift { x, .. }
            | Op::Sigmoid { x }
            | Op::Tanh { x }
            | Op::Log { x }
            | Op::Exp { x }
            | Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Clamp { x, .. }
            | Op::Gather { x, .. }
            | Op::Sum { x }
            | Op::Slice { x, .. } => vec![*x],
            Op::Embed { table, .. } => vec![*table],
            Op::Stack { items } | Op::Concat { items } => items.clone(),
        }
    }

    /// Replay the record against named inputs. Every declared input must be
    /// bound with its declared shape. Deterministic: identical inputs yield
    /// bit-identical outputs.
    pub fn evaluate(&self, bound: &HashMap<String, RealArray>) -> Result<Evaluation<'_>> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let out = match op {
                Op::Input { name } => {
                    let arr = bound.get(name).ok_or_else(|| {
                        Error::InvalidConfig(format!("input `{name}` not bound"))
                    })?;
                    if arr.shape() != self.shapes[idx].as_slice() {
                        return Err(self.mismatch(
                            &format!("input `{name}`"),
                            &self.shapes[idx],
                            arr.shape(),
                        ));
                    }
                    arr.values().to_vec()
                }
                Op::Constant { values } => values.clone(),
                Op::Matmul { a, b } => {
                    let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
                    let (m, k) = (sa[0], sa[1]);
                    let n = if sb.len() == 2 { sb[1] } else { 1 };
                    matmul(&values[a.0], &values[b.0], m, k, n)
                }
                Op::Add { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x + y),
                Op::Sub { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x - y),
                Op::Mul { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x * y),
                Op::Div { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x / y),
                Op::Scale { x, c } => values[x.0].iter().map(|v| v * c).collect(),
                Op::Shift { x, c } => values[x.0].iter().map(|v| v + c).collect(),
                Op::Sigmoid { x } => values[x.0].iter().map(|&v| sigmoid(v)).collect(),
                Op::Tanh { x } => values[x.0].iter().map(|v| v.tanh()).collect(),
                Op::Log { x } => values[x.0].iter().map(|v| v.ln()).collect(),
                Op::Exp { x } => values[x.0].iter().map(|v| v.exp()).collect(),
                Op::Softmax { x } => {
                    let cols = *self.shapes[x.0].last().unwrap();
                    rowwise(&values[x.0], cols, softmax_row)
                }
                Op::LogSoftmax { x } => {
                    let cols = *self.shapes[x.0].last().unwrap();
                    rowwise(&values[x.0], cols, log_softmax_row)
                }
                Op::Clamp { x, lo, hi } => {
                    values[x.0].iter().map(|v| v.clamp(*lo, *hi)).collect()
                }
                Op::Embed { table, ids } => {
                    let d = self.shapes[table.0][1];
                    let mut out = Vec::with_capacity(ids.len() * d);
                    for &id in ids {
                        out.extend_from_slice(&values[table.0][id * d..(id + 1) * d]);
                    }
                    out
                }
                Op::Gather { x, index } => vec![values[x.0][*index]],
                Op::Sum { x } => vec![values[x.0].iter().sum()],
                Op::Stack { items } | Op::Concat { items } => {
                    let mut out = Vec::new();
                    for &it in items {
                        out.extend_from_slice(&values[it.0]);
                    }
                    out
                }
                Op::Slice { x, start, len } => values[x.0][*start..start + len].to_vec(),
            };
            values.push(out);
        }
        Ok(Evaluation {
            graph: self,
            values,
        })
    }
}

/// The results of replaying a [`Graph`]: one value buffer per node.
pub struct Evaluation<'g> {
    graph: &'g Graph,
    values: Vec<Vec<f64>>,
}

/// Gradients returned by [`Evaluation::backward`], keyed by requested node.
pub struct Gradients {
    grads: HashMap<NodeId, Vec<f64>>,
    /// Requested nodes that the output does not depend on; they received a
    /// zero gradient.
    pub detached: Vec<NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.grads[&id]
    }
}

impl Evaluation<'_> {
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].len(), 1);
        self.values[id.0][0]
    }

    /// Walk the record in reverse from a scalar output, accumulating
    /// gradients for the requested nodes. Nodes outside the dependency cone
    /// come back as zeros and are listed in [`Gradients::detached`].
    ///
    /// Adjoints are only propagated into nodes that some requested node can
    /// reach, so gradients of frozen subtrees (e.g. model weights during a
    /// mask search) cost nothing.
    pub fn backward(&self, output: NodeId, wrt: &[NodeId]) -> Result<Gradients> {
        if self.values[output.0].len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward".into(),
                expected: vec![],
                actual: self.graph.shapes[output.0].clone(),
            });
        }
        // active[i]: node i is a requested node or depends on one.
        let mut active = vec![false; self.values.len()];
        for id in wrt {
            active[id.0] = true;
        }
        for idx in 0..self.values.len() {
            if !active[idx] {
                active[idx] = self
                    .graph
                    .operands(idx)
                    .iter()
                    .any(|op| active[op.0]);
            }
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            if !active[idx] {
                continue;
            }
            let Some(d_out) = adj[idx].take() else {
                continue;
            };
            self.backward_op(idx, &d_out, &active, &mut adj);
            // Keep the buffer: requested nodes may be interior.
            adj[idx] = Some(d_out);
        }

        let mut grads = HashMap::new();
        let mut detached = Vec::new();
        for &id in wrt {
            match adj[id.0].take() {
                Some(g) => {
                    grads.insert(id, g);
                }
                None => {
                    detached.push(id);
                    grads.insert(id, vec![0.0; self.values[id.0].len()]);
                }
            }
        }
        Ok(Gradients { grads, detached })
    }

    fn backward_op(&self, idx: usize, d_out: &[f64], active: &[bool], adj: &mut [Option<Vec<f64>>]) {
        let g = self.graph;
        let acc = |adj: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>| {
            if !active[id.0] {
                return;
            }
            match &mut adj[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(&contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &g.ops[idx] {
            Op::Input { .. } | Op::Constant { .. } => {}
            Op::Matmul { a, b } => {
                let (sa, sb) = (&g.shapes[a.0], &g.shapes[b.0]);
                let (m, k) = (sa[0], sa[1]);
                let n = if sb.len() == 2 { sb[1] } else { 1 };
                if n == 1 {
                    if active[a.0] {
                        acc(adj, *a, outer(d_out, &self.values[b.0]));
                    }
                    if active[b.0] {
                        acc(adj, *b, matvec_transposed(&self.values[a.0], d_out, m, k));
                    }
                } else {
                    if active[a.0] {
                        // dA = dC @ B^T
                        let bt = transpose(&self.values[b.0], k, n);
                        acc(adj, *a, matmul(d_out, &bt, m, n, k));
                    }
                    if active[b.0] {
                        // dB = A^T @ dC
                        let at = transpose(&self.values[a.0], m, k);
                        acc(adj, *b, matmul(&at, d_out, k, m, n));
                    }
                }
            }
            Op::Add { a, b } => {
                acc(adj, *a, d_out.to_vec());
                acc(adj, *b, d_out.to_vec());
            }
            Op::Sub { a, b } => {
                acc(adj, *a, d_out.to_vec());
                acc(adj, *b, d_out.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                acc(adj, *a, zip_with(d_out, &self.values[b.0], |d, y| d * y));
                acc(adj, *b, zip_with(d_out, &self.values[a.0], |d, x| d * x));
            }
            Op::Div { a, b } => {
                let bv = &self.values[b.0];
                acc(adj, *a, zip_with(d_out, bv, |d, y| d / y));
                let av = &self.values[a.0];
                let db: Vec<f64> = d_out
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(d, (x, y))| -d * x / (y * y))
                    .collect();
                acc(adj, *b, db);
            }
            Op::Scale { x, c } => acc(adj, *x, d_out.iter().map(|d| d * c).collect()),
            Op::Shift { x, .. } => acc(adj, *x, d_out.to_vec()),
            Op::Sigmoid { x } => {
                let y = &self.values[idx];
                acc(adj, *x, zip_with(d_out, y, |d, s| d * s * (1.0 - s)));
            }
            Op::Tanh { x } => {
                let y = &self.values[idx];
                acc(adj, *x, zip_with(d_out, y, |d, t| d * (1.0 - t * t)));
            }
            Op::Log { x } => {
                acc(adj, *x, zip_with(d_out, &self.values[x.0], |d, v| d / v));
            }
            Op::Exp { x } => {
                let y = &self.values[idx];
                acc(adj, *x, zip_with(d_out, y, |d, e| d * e));
            }
            Op::Softmax { x } => {
                let cols = *g.shapes[x.0].last().unwrap();
                let y = &self.values[idx];
                let mut dx = vec![0.0; y.len()];
                for (row, (yr, dr)) in y.chunks(cols).zip(d_out.chunks(cols)).enumerate() {
                    let dot: f64 = yr.iter().zip(dr).map(|(yi, di)| yi * di).sum();
                    for c in 0..cols {
                        dx[row * cols + c] = yr[c] * (dr[c] - dot);
                    }
                }
                acc(adj, *x, dx);
            }
            Op::LogSoftmax { x } => {
                let cols = *g.shapes[x.0].last().unwrap();
                let y = &self.values[idx];
                let mut dx = vec![0.0; y.len()];
                for (row, (yr, dr)) in y.chunks(cols).zip(d_out.chunks(cols)).enumerate() {
                    let dsum: f64 = dr.iter().sum();
                    for c in 0..cols {
                        dx[row * cols + c] = dr[c] - yr[c].exp() * dsum;
                    }
                }
                acc(adj, *x, dx);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.values[x.0];
                let dx: Vec<f64> = d_out
                    .iter()
                    .zip(xv)
                    .map(|(d, &v)| if v > *lo && v < *hi { *d } else { 0.0 })
                    .collect();
                acc(adj, *x, dx);
            }
            Op::Embed { table, ids } => {
                if active[table.0] {
                    let d = g.shapes[table.0][1];
                    let mut dt = vec![0.0; self.values[table.0].len()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += d_out[pos * d + c];
                        }
                    }
                    acc(adj, *table, dt);
                }
            }
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; self.values[x.0].len()];
                dx[*index] = d_out[0];
                acc(adj, *x, dx);
            }
            Op::Sum { x } => {
                acc(adj, *x, vec![d_out[0]; self.values[x.0].len()]);
            }
            Op::Stack { items } | Op::Concat { items } => {
                let mut offset = 0;
                for &it in items {
                    let n = self.values[it.0].len();
                    acc(adj, it, d_out[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Slice { x, start, len } => {
                let mut dx = vec![0.0; self.values[x.0].len()];
                dx[*start..start + len].copy_from_slice(&d_out[..*len]);
                acc(adj, *x, dx);
            }
        }
    }
}

/// Compare the analytic gradient of `output` w.r.t. one input against central
/// finite differences. Returns the max over coordinates of
/// `|analytic - fd| / (|analytic| + eps_abs)` with `eps_abs = 1e-8`.
pub fn finite_difference_check(
    graph: &Graph,
    bound: &HashMap<String, RealArray>,
    output: NodeId,
    input: NodeId,
    input_name: &str,
    epsilon: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    const EPS_ABS: f64 = 1e-8;
    let eval = graph.evaluate(bound)?;
    let analytic = eval.backward(output, &[input])?;
    let analytic = analytic.get(input);

    let base = bound
        .get(input_name)
        .ok_or_else(|| Error::InvalidConfig(format!("input `{input_name}` not bound")))?
        .clone();
    let mut worst: f64 = 0.0;
    for coord in 0..base.len() {
        let probe = |delta: f64| -> Result<f64> {
            let mut vals = base.values().to_vec();
            vals[coord] += delta;
            let mut b = bound.clone();
            b.insert(
                input_name.to_string(),
                RealArray::new(base.shape().to_vec(), vals)?,
            );
            Ok(graph.evaluate(&b)?.scalar(output))
        };
        let fd = (probe(epsilon)? - probe(-epsilon)?) / (2.0 * epsilon);
        let rel = (analytic[coord] - fd).abs() / (analytic[coord].abs() + EPS_ABS);
        worst = worst.max(rel);
    }
    Ok(worst)
}

// ── Scalar and dense kernels ─────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    if n == 1 {
        // matrix-vector: one dot product per output row
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            out.push(row.iter().zip(b).map(|(&av, &bv)| av * bv).sum());
        }
        return out;
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[i][p] = dc[i] * b[p]` — gradient of a matrix-vector product w.r.t.
/// the matrix.
fn outer(dc: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(dc.len() * b.len());
    for &d in dc {
        out.extend(b.iter().map(|&bv| d * bv));
    }
    out
}

/// `out[p] = sum_i a[i][p] * dc[i]` — gradient of a matrix-vector product
/// w.r.t. the vector, without materializing the transpose.
fn matvec_transposed(a: &[f64], dc: &[f64], _m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k];
    for (i, &d) in dc.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let row = &a[i * k..(i + 1) * k];
        for (o, &av) in out.iter_mut().zip(row) {
            *o += d * av;
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn rowwise(x: &[f64], cols: usize, f: impl Fn(&[f64], &mut [f64])) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        f(xr, or);
    }
    out
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bind(entries: &[(&str, RealArray)]) -> HashMap<String, RealArray> {
        entries
            .iter()
            .map(|(n, a)| (n.to_string(), a.clone()))
            .collect()
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let y = g.sigmoid(x);
        let eval = g
            .evaluate(&bind(&[("x", RealArray::vector(vec![0.0]).unwrap())]))
            .unwrap();
        assert_eq!(eval.value(y), &[0.5]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", vec![4]);
        let y = g.softmax(x).unwrap();
        let eval = g
            .evaluate(&bind(&[("x", RealArray::vector(vec![1.3; 4]).unwrap())]))
            .unwrap();
        for &p in eval.value(y) {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn clamp_boundary() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let y = g.clamp(x, 0.0, 1.0);
        let eval = g
            .evaluate(&bind(&[("x", RealArray::vector(vec![1.7]).unwrap())]))
            .unwrap();
        assert_eq!(eval.value(y), &[1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let s = g.sigmoid(x);
        let out = g.sum(s);
        let eval = g
            .evaluate(&bind(&[("x", RealArray::vector(vec![0.0]).unwrap())]))
            .unwrap();
        let grads = eval.backward(out, &[x]).unwrap();
        assert!((grads.get(x)[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", vec![1]);
        let y = g.mul(x, x).unwrap();
        let out = g.sum(y);
        let eval = g
            .evaluate(&bind(&[("x", RealArray::vector(vec![3.0]).unwrap())]))
            .unwrap();
        let grads = eval.backward(out, &[x]).unwrap();
        assert_eq!(grads.get(x)[0], 6.0);
    }

    #[test]
    fn clamp_subgradient_convention() {
        for (v, expect) in [(1.5, 0.0), (0.5, 1.0), (0.0, 0.0), (1.0, 0.0)] {
            let mut g = Graph::new();
            let x = g.input("x", vec![1]);
            let y = g.clamp(x, 0.0, 1.0);
            let out = g.sum(y);
            let eval = g
                .evaluate(&bind(&[("x", RealArray::vector(vec![v]).unwrap())]))
                .unwrap();
            let grads = eval.backward(out, &[x]).unwrap();
            assert_eq!(grads.get(x)[0], expect, "clamp grad at {v}");
        }
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.input("x", vec![2]);
        let y = g.scale(x, 2.0);
        let eval = g
            .evaluate(&bind(&[("x", RealArray::vector(vec![1.0, 2.0]).unwrap())]))
            .unwrap();
        assert!(eval.backward(y, &[x]).is_err());
    }

    #[test]
    fn detached_input_gets_zero_gradient_and_flag() {
        let mut g = Graph::new();
        let x = g.input("x", vec![2]);
        let z = g.input("z", vec![2]);
        let out = g.sum(x);
        let eval = g
            .evaluate(&bind(&[
                ("x", RealArray::vector(vec![1.0, 2.0]).unwrap()),
                ("z", RealArray::vector(vec![5.0, 5.0]).unwrap()),
            ]))
            .unwrap();
        let grads = eval.backward(out, &[x, z]).unwrap();
        assert_eq!(grads.get(z), &[0.0, 0.0]);
        assert_eq!(grads.detached, vec![z]);
        assert_eq!(grads.get(x), &[1.0, 1.0]);
    }

    #[test]
    fn quadratic_finite_difference() {
        // f(x) = sum(x * x) + sum(3x)
        let mut g = Graph::new();
        let x = g.input("x", vec![4]);
        let sq = g.mul(x, x).unwrap();
        let lin = g.scale(x, 3.0);
        let both = g.add(sq, lin).unwrap();
        let out = g.sum(both);
        let arr = RealArray::vector(vec![0.3, -1.2, 0.9, 1.7]).unwrap();
        let err =
            finite_difference_check(&g, &bind(&[("x", arr)]), out, x, "x", 1e-5).unwrap();
        assert!(err < 1e-6, "fd error {err}");
    }

    #[test]
    fn constant_output_zero_gradient_zero_error() {
        let mut g = Graph::new();
        let x = g.input("x", vec![3]);
        let c = g.constant_scalar(7.0);
        let _ = x;
        let out = g.sum(c);
        let arr = RealArray::vector(vec![0.1, 0.2, 0.3]).unwrap();
        let err =
            finite_difference_check(&g, &bind(&[("x", arr.clone())]), out, x, "x", 1e-5)
                .unwrap();
        assert_eq!(err, 0.0);
        let eval = g.evaluate(&bind(&[("x", arr)])).unwrap();
        let grads = eval.backward(out, &[x]).unwrap();
        assert_eq!(grads.get(x), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matrix_vector_and_matrix_matrix() {
        let mut g = Graph::new();
        let a = g.input("a", vec![2, 3]);
        let x = g.input("x", vec![3]);
        let y = g.matmul(a, x).unwrap();
        let eval = g
            .evaluate(&bind(&[
                (
                    "a",
                    RealArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                ),
                ("x", RealArray::vector(vec![1.0, 0.0, -1.0]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(eval.value(y), &[-2.0, -2.0]);

        let mut g2 = Graph::new();
        let a = g2.input("a", vec![2, 2]);
        let b = g2.input("b", vec![2, 2]);
        let c = g2.matmul(a, b).unwrap();
        let eval = g2
            .evaluate(&bind(&[
                ("a", RealArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
                ("b", RealArray::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap()),
            ]))
            .unwrap();
        assert_eq!(eval.value(c), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut g = Graph::new();
        let a = g.input("a", vec![2]);
        let b = g.input("b", vec![3]);
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.input("x", vec![8]);
        let w = g.input("w", vec![8, 8]);
        let h = g.matmul(w, x).unwrap();
        let t = g.tanh(h);
        let p = g.softmax(t).unwrap();
        let out = g.sum(p);
        let xs = RealArray::vector((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let ws =
            RealArray::matrix(8, 8, (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let bound = bind(&[("x", xs), ("w", ws)]);
        let e1 = g.evaluate(&bound).unwrap();
        let e2 = g.evaluate(&bound).unwrap();
        assert_eq!(e1.value(p), e2.value(p));
        assert_eq!(e1.scalar(out), e2.scalar(out));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let cols = rng.gen_range(2..9);
            let rows = rng.gen_range(1..4);
            let mut g = Graph::new();
            let x = g.input("x", vec![rows, cols]);
            let y = g.softmax(x).unwrap();
            let vals: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
            let eval = g
                .evaluate(&bind(&[("x", RealArray::new(vec![rows, cols], vals).unwrap())]))
                .unwrap();
            for row in eval.value(y).chunks(cols) {
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    /// Every differentiable primitive passes a finite-difference check on
    /// random inputs in [-2, 2], kept away from clamp kinks.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 6;
            let vals = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| loop {
                        let v: f64 = rng.gen_range(-2.0..2.0);
                        // keep away from the clamp kinks at 0 and 1
                        if (v - 0.0).abs() > 1e-3 && (v - 1.0).abs() > 1e-3 {
                            break v;
                        }
                    })
                    .collect()
            };
            let xv = RealArray::vector(vals(&mut rng)).unwrap();
            let yv = RealArray::vector(vals(&mut rng)).unwrap();
            let wv = RealArray::matrix(
                n,
                n,
                (0..n * n).map(|_| rng.gen_range(-2.0_f64..2.0)).collect(),
            )
            .unwrap();

            let mut g = Graph::new();
            let x = g.input("x", vec![n]);
            let y = g.input("y", vec![n]);
            let w = g.input("w", vec![n, n]);

            let mm = g.matmul(w, x).unwrap();
            let a = g.add(mm, y).unwrap();
            let s = g.sigmoid(a);
            let t = g.tanh(a);
            let m = g.mul(s, t).unwrap();
            let d = g.div(m, s).unwrap();
            let e = g.exp(t);
            let l = g.log(e);
            let cl = g.clamp(x, 0.0, 1.0);
            let sm = g.softmax(a).unwrap();
            let lsm = g.log_softmax(a).unwrap();
            let g1 = g.gather(sm, trial % n).unwrap();
            let cat = g.concat(&[d, l, cl]).unwrap();
            let st = g.stack(&[cat, cat]).unwrap();
            let sum_st = g.sum(st);
            let sum_lsm = g.sum(lsm);
            let total0 = g.add(sum_st, sum_lsm).unwrap();
            let total = g.add(total0, g1).unwrap();

            let bound = bind(&[("x", xv), ("y", yv), ("w", wv)]);
            for (node, name) in [(x, "x"), (y, "y"), (w, "w")] {
                let err =
                    finite_difference_check(&g, &bound, total, node, name, 1e-5).unwrap();
                assert!(err < 1e-4, "trial {trial}, input {name}: fd error {err}");
            }
        }
    }

    #[test]
    fn embed_scatter_add_gradient() {
        let mut g = Graph::new();
        let table = g.input("t", vec![3, 2]);
        // id 1 appears twice: its gradient rows must accumulate
        let e = g.embed(table, vec![1, 1, 2]).unwrap();
        let out = g.sum(e);
        let eval = g
            .evaluate(&bind(&[(
                "t",
                RealArray::matrix(3, 2, vec![0.0; 6]).unwrap(),
            )]))
            .unwrap();
        let grads = eval.backward(out, &[table]).unwrap();
        assert_eq!(grads.get(table), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
