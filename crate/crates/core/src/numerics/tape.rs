//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every forward operation in creation order, so node ids
//! are already a topological order and [`Tape::backward`] is a single reverse
//! sweep. Values are kept on the tape; backward rules read them from there.
//!
//! Stop-gradient points ([`Tape::detach`]) and value-dependent discrete
//! decisions ([`Tape::choose`]) can be logged on one tape and replayed on
//! another. Replaying freezes them, which turns the straight-through and
//! stop-gradient surrogate into an ordinary differentiable function that
//! finite differences can check.

use std::sync::Arc;

use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Directed message-passing edges `src → dst`, as consumed by attention ops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MessageEdges {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub num_nodes: usize,
}

impl MessageEdges {
    /// Builds the edge set sorted by `(dst, src)` with duplicates removed.
    ///
    /// Sorting fixes the summation order of every neighbourhood, so the order
    /// in which callers list edges never changes a result bit.
    pub fn new(num_nodes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut pairs: Vec<(usize, usize)> = pairs.into_iter().map(|(s, d)| (d, s)).collect();
        pairs.sort_unstable();
        pairs.dedup();
        let (dst, src) = pairs.into_iter().unzip();
        Self { src, dst, num_nodes }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// In-degree of every node.
    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &d in &self.dst {
            deg[d] += 1;
        }
        deg
    }
}

/// Stop-gradient values and discrete decisions captured from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct FrozenLog {
    detached: Vec<Tensor>,
    choices: Vec<Vec<usize>>,
}

#[derive(Debug)]
enum FrozenMode {
    Off,
    Record(FrozenLog),
    Replay { log: FrozenLog, next_detach: usize, next_choice: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LogSigmoid(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    RowDot(Var, Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MaskedSoftmax(Var, Arc<[bool]>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Arc<[usize]>),
    Diag(Var),
    NormalizeRows(Var, f64),
    Pick(Var, Arc<[usize]>),
    AttnScores { q: Var, k: Var, edges: Arc<MessageEdges>, heads: usize, scale: f64 },
    SegmentSoftmax(Var, Arc<[usize]>),
    AttnAggregate { alpha: Var, v: Var, edges: Arc<MessageEdges>, heads: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, ParamId)>,
    frozen: FrozenMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bindings: Vec::new(), frozen: FrozenMode::Off }
    }

    /// A tape that logs every detach and choice for later replay.
    pub fn recording() -> Self {
        Self { frozen: FrozenMode::Record(FrozenLog::default()), ..Self::new() }
    }

    /// A tape that returns logged values at every detach and choice.
    pub fn replaying(log: FrozenLog) -> Self {
        Self {
            frozen: FrozenMode::Replay { log, next_detach: 0, next_choice: 0 },
            ..Self::new()
        }
    }

    /// Takes the log captured by a [`Tape::recording`] tape.
    pub fn take_frozen_log(&mut self) -> Option<FrozenLog> {
        match std::mem::replace(&mut self.frozen, FrozenMode::Off) {
            FrozenMode::Record(log) => Some(log),
            other => {
                self.frozen = other;
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(op_name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::LogSigmoid(x)
            | Op::Clamp(x, _, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::MeanRows(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x, _)
            | Op::MaskedSoftmax(x, _)
            | Op::SliceCols(x, _, _)
            | Op::GatherRows(x, _)
            | Op::Diag(x)
            | Op::NormalizeRows(x, _)
            | Op::Pick(x, _)
            | Op::SegmentSoftmax(x, _) => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(xs) => xs.clone(),
            Op::AttnScores { q, k, .. } => vec![*q, *k],
            Op::AttnAggregate { alpha, v, .. } => vec![*alpha, *v],
        }
    }

    // ---- leaves -----------------------------------------------------------

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        let v = self.push("leaf", value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push("constant", value, Op::Leaf)
    }

    /// Binds a stored parameter as a gradient-receiving leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, NumericsError> {
        let v = self.leaf(store.value(id).clone())?;
        self.bindings.push((v, id));
        Ok(v)
    }

    /// Stop-gradient: a constant copy of `x`'s value.
    pub fn detach(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = match &mut self.frozen {
            FrozenMode::Replay { log, next_detach, .. } => {
                let t = log
                    .detached
                    .get(*next_detach)
                    .cloned()
                    .ok_or(NumericsError::Contract("frozen log exhausted at detach"))?;
                *next_detach += 1;
                if t.dims2() != self.nodes[x.0].value.dims2() {
                    return Err(NumericsError::Contract("frozen detach shape differs from live value"));
                }
                t
            }
            FrozenMode::Record(log) => {
                let t = self.nodes[x.0].value.clone();
                log.detached.push(t.clone());
                t
            }
            FrozenMode::Off => self.nodes[x.0].value.clone(),
        };
        self.constant(value)
    }

    /// Runs a value-dependent discrete decision, or replays a logged one.
    pub fn choose(
        &mut self,
        decide: impl FnOnce(&Tape) -> Vec<usize>,
    ) -> Result<Vec<usize>, NumericsError> {
        if let FrozenMode::Replay { log, next_choice, .. } = &mut self.frozen {
            let c = log
                .choices
                .get(*next_choice)
                .cloned()
                .ok_or(NumericsError::Contract("frozen log exhausted at choice"))?;
            *next_choice += 1;
            return Ok(c);
        }
        let c = decide(self);
        if let FrozenMode::Record(log) = &mut self.frozen {
            log.choices.push(c.clone());
        }
        Ok(c)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Validates, evaluates and records `op`.
    fn record(&mut self, name: &'static str, op: Op) -> Result<Var, NumericsError> {
        let value = self.compute(&op)?;
        self.push(name, value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        self.record("matmul", Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.record("transpose", Op::Transpose(x))
    }

    // ---- elementwise ------------------------------------------------------

    fn same_dims(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize), NumericsError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(NumericsError::Shape(format!("{op}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_dims(a, b, "add")?;
        self.record("add", Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_dims(a, b, "sub")?;
        self.record("sub", Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_dims(a, b, "mul")?;
        self.record("mul", Op::Mul(a, b))
    }

    /// `x (n×d) + row (1×d)`, broadcasting the row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if self.dims(row) != (1, d) {
            return Err(NumericsError::Shape(format!(
                "add_row: {n}x{d} with {:?}",
                self.dims(row)
            )));
        }
        self.record("add_row", Op::AddRow(x, row))
    }

    /// `x (n×d) ⊙ c (n×1)`, scaling each row by its coefficient.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if self.dims(c) != (n, 1) {
            return Err(NumericsError::Shape(format!("mul_col: {n}x{d} with {:?}", self.dims(c))));
        }
        self.record("mul_col", Op::MulCol(x, c))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        self.record("scale", Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.record("relu", Op::Relu(x))
    }

    /// Numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.record("log_sigmoid", Op::LogSigmoid(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        self.record("clamp", Op::Clamp(x, lo, hi))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.record("sum", Op::Sum(x))
    }

    /// Mean of all entries; the mean of an empty tensor is zero.
    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.record("mean", Op::Mean(x))
    }

    /// Row sums, `n×d → n×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.record("sum_cols", Op::SumCols(x))
    }

    /// Column means, `n×d → 1×d`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        if self.dims(x).0 == 0 {
            return Err(NumericsError::Shape("mean_rows over zero rows".into()));
        }
        self.record("mean_rows", Op::MeanRows(x))
    }

    /// Per-row inner products, `(n×d, n×d) → n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_dims(a, b, "row_dot")?;
        self.record("row_dot", Op::RowDot(a, b))
    }

    /// Sum of squared entries.
    pub fn sq_sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let sq = self.mul(x, x)?;
        self.sum(sq)
    }

    // ---- normalisers ------------------------------------------------------

    /// Softmax along `axis` (1: within each row, 0: within each column).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        if axis > 1 {
            return Err(NumericsError::Shape(format!("softmax axis {axis}")));
        }
        self.record("softmax", Op::Softmax(x, axis))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        if axis > 1 {
            return Err(NumericsError::Shape(format!("log_softmax axis {axis}")));
        }
        self.record("log_softmax", Op::LogSoftmax(x, axis))
    }

    /// Row softmax restricted to entries where `keep` is true; the rest are 0.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if keep.len() != n * d {
            return Err(NumericsError::Shape("masked_softmax mask length".into()));
        }
        if keep.chunks(d.max(1)).any(|row| !row.iter().any(|&k| k)) && d > 0 {
            return Err(NumericsError::Contract("masked_softmax row keeps no entry"));
        }
        self.record("masked_softmax", Op::MaskedSoftmax(x, keep.into()))
    }

    /// Row-wise layer normalisation with ε = 1e-5 inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let (_, d) = self.dims(x);
        if self.dims(gain) != (1, d) || self.dims(bias) != (1, d) {
            return Err(NumericsError::Shape(format!("layer_norm: last dimension {d}")));
        }
        let (out, xhat, inv_std) = layer_norm_raw(self.value(x), self.value(gain), self.value(bias));
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Divides each row by its Euclidean norm plus `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, NumericsError> {
        self.record("normalize_rows", Op::NormalizeRows(x, eps))
    }

    // ---- structure --------------------------------------------------------

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let n = xs.first().map(|&x| self.dims(x).0).unwrap_or(0);
        if xs.iter().any(|&x| self.dims(x).0 != n) {
            return Err(NumericsError::Shape("concat_cols: row counts differ".into()));
        }
        self.record("concat_cols", Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (_, d) = self.dims(x);
        if start + len > d {
            return Err(NumericsError::Shape(format!("slice_cols {start}+{len} of {d}")));
        }
        self.record("slice_cols", Op::SliceCols(x, start, len))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (n, _) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::Shape(format!("gather_rows index {bad} of {n}")));
        }
        self.record("gather_rows", Op::GatherRows(x, idx.into()))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if n != d {
            return Err(NumericsError::Shape(format!("diag of {n}x{d}")));
        }
        self.record("diag", Op::Diag(x))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if idx.len() != n || idx.iter().any(|&j| j >= d) {
            return Err(NumericsError::Shape("pick indices".into()));
        }
        self.record("pick", Op::Pick(x, idx.into()))
    }

    // ---- attention --------------------------------------------------------

    /// Per-edge, per-head scaled dot products `scale·⟨q_dst, k_src⟩`, `E×H`.
    pub fn attn_scores(
        &mut self,
        q: Var,
        k: Var,
        edges: &Arc<MessageEdges>,
        heads: usize,
        scale: f64,
    ) -> Result<Var, NumericsError> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        if d != dk || heads == 0 || d % heads != 0 {
            return Err(NumericsError::Shape(format!("attn_scores d={d}/{dk} heads={heads}")));
        }
        check_edges(edges, nk, nq)?;
        self.record("attn_scores", Op::AttnScores { q, k, edges: edges.clone(), heads, scale })
    }

    /// Softmax over rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var, NumericsError> {
        if segments.len() != self.dims(x).0 {
            return Err(NumericsError::Shape("segment_softmax segment count".into()));
        }
        self.record("segment_softmax", Op::SegmentSoftmax(x, segments.into()))
    }

    /// `out[dst] += α[e, head(c)] · v[src, c]` over all edges, `num_nodes×d`.
    pub fn attn_aggregate(
        &mut self,
        alpha: Var,
        v: Var,
        edges: &Arc<MessageEdges>,
        heads: usize,
    ) -> Result<Var, NumericsError> {
        let (ne, h) = self.dims(alpha);
        let (nv, d) = self.dims(v);
        if ne != edges.len() || h != heads || heads == 0 || d % heads != 0 {
            return Err(NumericsError::Shape("attn_aggregate shapes".into()));
        }
        check_edges(edges, nv, edges.num_nodes)?;
        self.record("attn_aggregate", Op::AttnAggregate { alpha, v, edges: edges.clone(), heads })
    }

    // ---- evaluation -------------------------------------------------------

    /// Value of an already validated `op` from the current values of its inputs.
    fn compute(&self, op: &Op) -> Result<Tensor, NumericsError> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let map = |x: &Var, f: &dyn Fn(f64) -> f64| {
            let t = val(x);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        };
        let zip = |a: &Var, b: &Var, f: &dyn Fn(f64, f64) -> f64| {
            let (ta, tb) = (val(a), val(b));
            Tensor::new(ta.shape().to_vec(), ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
        };
        match op {
            Op::Leaf => Err(NumericsError::Contract("a leaf has no rule")),
            Op::MatMul(a, b) => {
                let ((m, k), n) = (val(a).dims2(), val(b).dims2().1);
                Tensor::matrix(m, n, matmul_raw(val(a).data(), val(b).data(), m, k, n))
            }
            Op::Transpose(x) => {
                let (r, c) = val(x).dims2();
                Tensor::matrix(c, r, transpose_raw(val(x).data(), r, c))
            }
            Op::Add(a, b) => zip(a, b, &|x, y| x + y),
            Op::Sub(a, b) => zip(a, b, &|x, y| x - y),
            Op::Mul(a, b) => zip(a, b, &|x, y| x * y),
            Op::AddRow(x, row) => {
                let (n, d) = val(x).dims2();
                let r = val(row).data();
                let mut out = val(x).data().to_vec();
                for chunk in out.chunks_mut(d.max(1)) {
                    for (o, b) in chunk.iter_mut().zip(r) {
                        *o += b;
                    }
                }
                Tensor::matrix(n, d, out)
            }
            Op::MulCol(x, c) => {
                let (n, d) = val(x).dims2();
                let cv = val(c).data();
                let mut out = val(x).data().to_vec();
                for (i, chunk) in out.chunks_mut(d.max(1)).enumerate() {
                    for o in chunk {
                        *o *= cv[i];
                    }
                }
                Tensor::matrix(n, d, out)
            }
            Op::Scale(x, s) => map(x, &|v| v * s),
            Op::Relu(x) => map(x, &|v| v.max(0.0)),
            Op::LogSigmoid(x) => map(x, &log_sigmoid),
            Op::Clamp(x, lo, hi) => map(x, &|v| v.clamp(*lo, *hi)),
            Op::Sum(x) => Ok(Tensor::scalar(val(x).data().iter().sum())),
            Op::Mean(x) => {
                let t = val(x);
                Ok(Tensor::scalar(if t.is_empty() { 0.0 } else { t.data().iter().sum::<f64>() / t.len() as f64 }))
            }
            Op::SumCols(x) => {
                let t = val(x);
                let (n, d) = t.dims2();
                Tensor::matrix(n, 1, (0..n).map(|i| t.data()[i * d..(i + 1) * d].iter().sum()).collect())
            }
            Op::MeanRows(x) => {
                let t = val(x);
                let (n, d) = t.dims2();
                let mut out = vec![0.0; d];
                for i in 0..n {
                    for (o, v) in out.iter_mut().zip(t.row(i)) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= n as f64);
                Tensor::matrix(1, d, out)
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let n = ta.rows();
                Tensor::matrix(n, 1, (0..n).map(|i| ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| x * y).sum()).collect())
            }
            Op::Softmax(x, axis) => {
                let (n, d) = val(x).dims2();
                Tensor::matrix(n, d, axis_apply(val(x).data(), n, d, *axis, softmax_slice)?)
            }
            Op::LogSoftmax(x, axis) => {
                let (n, d) = val(x).dims2();
                Tensor::matrix(n, d, axis_apply(val(x).data(), n, d, *axis, log_softmax_slice)?)
            }
            Op::MaskedSoftmax(x, keep) => {
                let t = val(x);
                let (n, d) = t.dims2();
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    let row = t.row(i);
                    let mask = &keep[i * d..(i + 1) * d];
                    let max = row
                        .iter()
                        .zip(mask)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| *v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..d {
                        if mask[j] {
                            let e = (row[j] - max).exp();
                            out[i * d + j] = e;
                            z += e;
                        }
                    }
                    out[i * d..(i + 1) * d].iter_mut().for_each(|o| *o /= z);
                }
                Tensor::matrix(n, d, out)
            }
            Op::LayerNorm { x, gain, bias, .. } => Ok(layer_norm_raw(val(x), val(gain), val(bias)).0),
            Op::NormalizeRows(x, eps) => {
                let t = val(x);
                let (n, d) = t.dims2();
                let mut out = t.data().to_vec();
                for i in 0..n {
                    let r = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    out[i * d..(i + 1) * d].iter_mut().for_each(|o| *o /= r + eps);
                }
                Tensor::matrix(n, d, out)
            }
            Op::ConcatCols(xs) => {
                let n = xs.first().map_or(0, |x| val(x).rows());
                let total: usize = xs.iter().map(|x| val(x).dims2().1).sum();
                let mut out = Vec::with_capacity(n * total);
                for i in 0..n {
                    for x in xs {
                        out.extend_from_slice(val(x).row(i));
                    }
                }
                Tensor::matrix(n, total, out)
            }
            Op::SliceCols(x, start, len) => {
                let t = val(x);
                let n = t.rows();
                let mut out = Vec::with_capacity(n * len);
                for i in 0..n {
                    out.extend_from_slice(&t.row(i)[*start..start + len]);
                }
                Tensor::matrix(n, *len, out)
            }
            Op::GatherRows(x, idx) => Ok(val(x).select_rows(idx)),
            Op::Diag(x) => {
                let t = val(x);
                Tensor::matrix(t.rows(), 1, (0..t.rows()).map(|i| t.at(i, i)).collect())
            }
            Op::Pick(x, idx) => {
                let t = val(x);
                Tensor::matrix(idx.len(), 1, idx.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect())
            }
            Op::AttnScores { q, k, edges, heads, scale } => {
                let (tq, tk) = (val(q), val(k));
                let hd = tq.dims2().1 / heads;
                let mut out = vec![0.0; edges.len() * heads];
                for e in 0..edges.len() {
                    let (qi, kj) = (tq.row(edges.dst[e]), tk.row(edges.src[e]));
                    for h in 0..*heads {
                        let r = h * hd..(h + 1) * hd;
                        out[e * heads + h] =
                            scale * qi[r.clone()].iter().zip(&kj[r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Tensor::matrix(edges.len(), *heads, out)
            }
            Op::SegmentSoftmax(x, segments) => {
                let t = val(x);
                let (e, h) = t.dims2();
                let nseg = segments.iter().max().map_or(0, |m| m + 1);
                let mut max = vec![f64::NEG_INFINITY; nseg * h];
                for r in 0..e {
                    for c in 0..h {
                        let m = &mut max[segments[r] * h + c];
                        *m = m.max(t.at(r, c));
                    }
                }
                let mut out = vec![0.0; e * h];
                let mut z = vec![0.0; nseg * h];
                for r in 0..e {
                    for c in 0..h {
                        let v = (t.at(r, c) - max[segments[r] * h + c]).exp();
                        out[r * h + c] = v;
                        z[segments[r] * h + c] += v;
                    }
                }
                for r in 0..e {
                    for c in 0..h {
                        out[r * h + c] /= z[segments[r] * h + c];
                    }
                }
                Tensor::matrix(e, h, out)
            }
            Op::AttnAggregate { alpha, v, edges, heads } => {
                let (ta, tv) = (val(alpha), val(v));
                let d = tv.dims2().1;
                let hd = d / heads;
                let mut out = vec![0.0; edges.num_nodes * d];
                for e in 0..edges.len() {
                    let (s, t) = (edges.src[e], edges.dst[e]);
                    let vs = tv.row(s);
                    let row = ta.row(e);
                    for c in 0..d {
                        out[t * d + c] += row[c / hd] * vs[c];
                    }
                }
                Tensor::matrix(edges.num_nodes, d, out)
            }
        }
    }

    /// Nodes up to `out` whose value depends on leaf `x`, in evaluation order.
    pub fn downstream(&self, x: Var, out: Var) -> Vec<Var> {
        let mut dirty = vec![false; out.0 + 1];
        let mut order = Vec::new();
        if x.0 > out.0 {
            return order;
        }
        dirty[x.0] = true;
        for id in x.0 + 1..=out.0 {
            if self.inputs_of(&self.nodes[id].op).iter().any(|v| dirty[v.0]) {
                dirty[id] = true;
                order.push(Var(id));
            }
        }
        order
    }

    /// Value of scalar `out` with entry `index` of leaf `x` shifted by `delta`.
    ///
    /// Only the nodes in `order` (from [`Tape::downstream`]) are recomputed,
    /// from the ops recorded on this tape, so recorded choices and detached
    /// values stay fixed. The tape is restored before returning.
    pub fn perturbed_value(
        &mut self,
        x: Var,
        index: usize,
        delta: f64,
        order: &[Var],
        out: Var,
    ) -> Result<f64, NumericsError> {
        if !matches!(self.nodes[x.0].op, Op::Leaf) {
            return Err(NumericsError::Contract("only leaves can be perturbed"));
        }
        let x0 = self.nodes[x.0].value.data()[index];
        self.nodes[x.0].value.data_mut()[index] = x0 + delta;
        let mut saved = Vec::with_capacity(order.len());
        let mut result = Ok(());
        for &v in order {
            match self.compute(&self.nodes[v.0].op) {
                Ok(t) => saved.push((v, std::mem::replace(&mut self.nodes[v.0].value, t))),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let value = self.nodes[out.0].value.data()[0];
        for (v, t) in saved {
            self.nodes[v.0].value = t;
        }
        self.nodes[x.0].value.data_mut()[index] = x0;
        result.map(|_| value)
    }

    /// The tape node a parameter was bound to, if any.
    pub fn binding(&self, id: ParamId) -> Option<Var> {
        self.bindings.iter().find(|(_, p)| *p == id).map(|(v, _)| *v)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of a single-element `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::Contract("backward on an empty tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Adds this tape's gradients of bound parameters into `store`.
    ///
    /// Every parameter bound on the tape receives a gradient entry, zero when
    /// the loss does not depend on it.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(v, id) in &self.bindings {
            match grads.get(v) {
                Some(g) => store.accumulate_grad(id, g.data()),
                None => store.touch_grad(id),
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let len = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; len]));
            }
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                let da = gemm(g, false, val(*b).data(), true, m, n, k);
                acc(*a, &mut |ga| add_into(ga, &da));
                let db = gemm(val(*a).data(), true, g, false, k, m, n);
                acc(*b, &mut |gb| add_into(gb, &db));
            }
            Op::Transpose(x) => {
                let (r, c) = val(*x).dims2();
                let gt = transpose_raw(g, c, r);
                acc(*x, &mut |gx| add_into(gx, &gt));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                let d = val(*x).dims2().1;
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(d.max(1)) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulCol(x, c) => {
                let d = val(*x).dims2().1.max(1);
                let (vx, vc) = (val(*x).data(), val(*c).data());
                acc(*x, &mut |gx| {
                    for (i, (gr, gg)) in gx.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        gr.iter_mut().zip(gg).for_each(|(o, v)| *o += v * vc[i]);
                    }
                });
                acc(*c, &mut |gc| {
                    for (i, (xr, gg)) in vx.chunks(d).zip(g.chunks(d)).enumerate() {
                        gc[i] += xr.iter().zip(gg).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)),
            Op::Relu(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if vx[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid(-vx[i]);
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x).data();
                acc(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SumCols(x) => {
                let d = val(*x).dims2().1.max(1);
                acc(*x, &mut |gx| {
                    for (i, chunk) in gx.chunks_mut(d).enumerate() {
                        chunk.iter_mut().for_each(|o| *o += g[i]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).dims2();
                acc(*x, &mut |gx| {
                    for chunk in gx.chunks_mut(d.max(1)) {
                        chunk.iter_mut().zip(g).for_each(|(o, v)| *o += v / n as f64);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let d = val(*a).dims2().1.max(1);
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i / d] * vb[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i / d] * va[i];
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (n, d) = out.dims2();
                let y = out.data();
                let dx = axis_backward(y, g, n, d, *axis, |ys, gs, dxs| {
                    let dot: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                    for i in 0..ys.len() {
                        dxs[i] = ys[i] * (gs[i] - dot);
                    }
                });
                acc(*x, &mut |gx| add_into(gx, &dx));
            }
            Op::LogSoftmax(x, axis) => {
                let (n, d) = out.dims2();
                let y = out.data();
                let dx = axis_backward(y, g, n, d, *axis, |ys, gs, dxs| {
                    let total: f64 = gs.iter().sum();
                    for i in 0..ys.len() {
                        dxs[i] = gs[i] - ys[i].exp() * total;
                    }
                });
                acc(*x, &mut |gx| add_into(gx, &dx));
            }
            Op::MaskedSoftmax(x, _) => {
                let (n, d) = out.dims2();
                let y = out.data();
                let dx = axis_backward(y, g, n, d, 1, |ys, gs, dxs| {
                    let dot: f64 = ys.iter().zip(gs.iter()).map(|(a, b)| a * b).sum();
                    for i in 0..ys.len() {
                        dxs[i] = ys[i] * (gs[i] - dot);
                    }
                });
                acc(*x, &mut |gx| add_into(gx, &dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (n, d) = out.dims2();
                let gn = val(*gain).data();
                acc(*gain, &mut |gg| {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks(d.max(1)) {
                        add_into(gb, chunk);
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        let r = i * d..(i + 1) * d;
                        let dxh: Vec<f64> = (0..d).map(|j| g[r.start + j] * gn[j]).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh = dxh
                            .iter()
                            .zip(&xhat[r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[r.start + j] += inv_std[i]
                                * (dxh[j] - mean_dxh - xhat[r.start + j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let n = out.dims2().0;
                let total = out.dims2().1;
                let mut offset = 0;
                for &x in xs {
                    let w = val(x).dims2().1;
                    acc(x, &mut |gx| {
                        for i in 0..n {
                            let src = &g[i * total + offset..i * total + offset + w];
                            add_into(&mut gx[i * w..(i + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(x, start, _) => {
                let (n, len) = out.dims2();
                let d = val(*x).dims2().1;
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        add_into(
                            &mut gx[i * d + start..i * d + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = val(*x).dims2().1;
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Diag(x) => {
                let n = val(*x).dims2().0;
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                });
            }
            Op::NormalizeRows(x, eps) => {
                let (n, d) = val(*x).dims2();
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        let row = vx.row(i);
                        let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let s = r + eps;
                        let gr = &g[i * d..(i + 1) * d];
                        let gdotx: f64 = gr.iter().zip(row).map(|(a, b)| a * b).sum();
                        let coef = if r > 0.0 { gdotx / (s * s * r) } else { 0.0 };
                        for j in 0..d {
                            gx[i * d + j] += gr[j] / s - row[j] * coef;
                        }
                    }
                });
            }
            Op::Pick(x, idx) => {
                let d = val(*x).dims2().1;
                acc(*x, &mut |gx| {
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * d + j] += g[i];
                    }
                });
            }
            Op::AttnScores { q, k, edges, heads, scale } => {
                let d = val(*q).dims2().1;
                let hd = d / heads;
                let (vq, vk) = (val(*q), val(*k));
                acc(*q, &mut |gq| {
                    for e in 0..edges.len() {
                        let (t, s) = (edges.dst[e], edges.src[e]);
                        let kr = vk.row(s);
                        for c in 0..d {
                            gq[t * d + c] += scale * g[e * heads + c / hd] * kr[c];
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for e in 0..edges.len() {
                        let (t, s) = (edges.dst[e], edges.src[e]);
                        let qr = vq.row(t);
                        for c in 0..d {
                            gk[s * d + c] += scale * g[e * heads + c / hd] * qr[c];
                        }
                    }
                });
            }
            Op::SegmentSoftmax(x, segments) => {
                let (e, h) = out.dims2();
                let y = out.data();
                let nseg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg * h];
                for r in 0..e {
                    for c in 0..h {
                        dot[segments[r] * h + c] += y[r * h + c] * g[r * h + c];
                    }
                }
                acc(*x, &mut |gx| {
                    for r in 0..e {
                        for c in 0..h {
                            let i = r * h + c;
                            gx[i] += y[i] * (g[i] - dot[segments[r] * h + c]);
                        }
                    }
                });
            }
            Op::AttnAggregate { alpha, v, edges, heads } => {
                let d = val(*v).dims2().1;
                let hd = d / heads;
                let (va, vv) = (val(*alpha), val(*v));
                acc(*alpha, &mut |ga| {
                    for e in 0..edges.len() {
                        let (t, s) = (edges.dst[e], edges.src[e]);
                        let vs = vv.row(s);
                        for c in 0..d {
                            ga[e * heads + c / hd] += g[t * d + c] * vs[c];
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for e in 0..edges.len() {
                        let (t, s) = (edges.dst[e], edges.src[e]);
                        for c in 0..d {
                            gv[s * d + c] += va.at(e, c / hd) * g[t * d + c];
                        }
                    }
                });
            }
        }
    }
}

/// Layer-norm output together with the normalised input and inverse deviations.
fn layer_norm_raw(t: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    const EPS: f64 = 1e-5;
    let (n, d) = t.dims2();
    let (g, b) = (gain.data(), bias.data());
    let mut xhat = vec![0.0; n * d];
    let mut inv_std = vec![0.0; n];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = t.row(i);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mu) * is;
            xhat[i * d + j] = xh;
            out[i * d + j] = g[j] * xh + b[j];
        }
    }
    (Tensor::matrix(n, d, out).expect("layer_norm shape"), xhat, inv_std)
}

fn check_edges(edges: &MessageEdges, n_src: usize, n_dst: usize) -> Result<(), NumericsError> {
    if edges.src.iter().any(|&s| s >= n_src) || edges.dst.iter().any(|&t| t >= n_dst) {
        return Err(NumericsError::Shape("edge endpoint outside node range".into()));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, false, b, false, m, k, n)
}

/// `op(a) · op(b)` for row-major `a` (m×k after `op`) and `b` (k×n after `op`).
fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths the callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn log_softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = x - lse;
    }
}

/// Applies `f` to each row (axis 1) or column (axis 0) of an `n×d` buffer.
fn axis_apply(
    data: &[f64],
    n: usize,
    d: usize,
    axis: usize,
    f: fn(&[f64], &mut [f64]),
) -> Result<Vec<f64>, NumericsError> {
    let mut out = vec![0.0; n * d];
    match axis {
        1 => {
            for i in 0..n {
                f(&data[i * d..(i + 1) * d], &mut out[i * d..(i + 1) * d]);
            }
        }
        0 => {
            let mut col = vec![0.0; n];
            let mut res = vec![0.0; n];
            for j in 0..d {
                for i in 0..n {
                    col[i] = data[i * d + j];
                }
                f(&col, &mut res);
                for i in 0..n {
                    out[i * d + j] = res[i];
                }
            }
        }
        _ => return Err(NumericsError::Shape(format!("axis {axis} invalid for a matrix"))),
    }
    Ok(out)
}

fn axis_backward(
    y: &[f64],
    g: &[f64],
    n: usize,
    d: usize,
    axis: usize,
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Vec<f64> {
    let mut dx = vec![0.0; n * d];
    if axis == 1 {
        for i in 0..n {
            let r = i * d..(i + 1) * d;
            f(&y[r.clone()], &g[r.clone()], &mut dx[r]);
        }
    } else {
        let (mut ys, mut gs, mut out) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for j in 0..d {
            for i in 0..n {
                ys[i] = y[i * d + j];
                gs[i] = g[i * d + j];
            }
            f(&ys, &gs, &mut out);
            for i in 0..n {
                dx[i * d + j] = out[i];
            }
        }
    }
    dx
}
