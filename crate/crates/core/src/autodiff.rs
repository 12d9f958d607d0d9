//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A `Tape` records operations eagerly during the forward pass and replays
//! them in reverse to propagate gradients. Every tensor is two-dimensional
//! (vectors are `1xN` or `Nx1`, scalars `1x1`), stored row-major in `f64`.
//! Persistent parameters live in a `ParamStore` outside any tape; a tape
//! borrows their values through `Arc` leaves, and `backward` accumulates
//! gradients back into the store until `zero_grads` is called.
//!
//! Sequence batches use a time-major layout throughout: a batch of B
//! sequences of length n is a `(n*B) x cols` matrix whose row `t*B + b`
//! holds element `t` of sequence `b`. The attention ops (`softmax_time`,
//! `attend_time`) and `lstm_step` operate on that layout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ── Tensor ───────────────────────────────────────────────────────────

/// Dense row-major 2-D array of f64.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Parameter store ──────────────────────────────────────────────────

/// Index of a parameter inside a `ParamStore`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// One named learnable (or frozen) array with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Every parameter array of one model, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = vec![0.0; value.numel()];
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            grad,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Mutable access to a parameter's values. Only valid between passes:
    /// any tape holding a leaf of this parameter must have been dropped,
    /// otherwise the Arc is shared and this clones the tensor.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }

    /// Number of scalar entries across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Snapshot of all parameter values (cheap: bumps refcounts).
    pub fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Arc<Tensor>]) {
        assert_eq!(snapshot.len(), self.params.len(), "snapshot size mismatch");
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value = s.clone();
        }
    }

    /// Serializable copy of every parameter array (checkpoint payload).
    pub fn export_values(&self) -> Vec<SavedParam> {
        self.params
            .iter()
            .map(|p| SavedParam {
                name: p.name.clone(),
                value: (*p.value).clone(),
                trainable: p.trainable,
            })
            .collect()
    }

    /// Restore parameter values by name; every saved array must match an
    /// existing parameter of the same shape, bitwise.
    pub fn import_values(&mut self, saved: &[SavedParam]) -> Result<()> {
        if saved.len() != self.params.len() {
            return Err(Error::data(format!(
                "checkpoint holds {} parameters, model has {}",
                saved.len(),
                self.params.len()
            )));
        }
        for s in saved {
            let id = self.by_name(&s.name).ok_or_else(|| {
                Error::data(format!("checkpoint parameter `{}` not in model", s.name))
            })?;
            let current = self.value(id);
            if current.rows() != s.value.rows() || current.cols() != s.value.cols() {
                return Err(Error::data(format!(
                    "checkpoint parameter `{}` has shape {}, model expects {}",
                    s.name,
                    s.value.shape_str(),
                    current.shape_str()
                )));
            }
            self.params[id.0].value = Arc::new(s.value.clone());
        }
        Ok(())
    }
}

/// One named parameter array as stored in a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

// ── Matmul kernels ───────────────────────────────────────────────────

/// out += A[m x k] * B[k x n]
fn matmul_nn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..kk * n + n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// out += A[m x k] * B[p x k]^T  (row-by-row dot products)
fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], p: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for t in 0..k {
                s += arow[t] * brow[t];
            }
            orow[j] += s;
        }
    }
}

/// out += A[m x k]^T * B[m x n]
fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..kk * n + n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

// ── Operation records ────────────────────────────────────────────────

/// Node index within one tape.
pub type NodeId = usize;

/// Broadcast mode for `add`: `Tile` repeats the right operand's row block
/// cyclically down the left operand (a 1xq bias row is the common case).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AddBcast {
    Same,
    Tile,
}

#[derive(Clone, Debug)]
enum Op {
    /// Constant input; never receives gradient.
    Leaf,
    /// Non-parameter input that wants a gradient (for tests and probes).
    Var,
    /// Parameter leaf; gradient is accumulated into the store.
    Param { id: ParamId },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId, bcast: AddBcast },
    /// Elementwise product; `b` may be 1x1 (scalar broadcast).
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddConst { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Ln { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    /// Column-wise softmax over time for a time-major `(n*B) x q` matrix.
    SoftmaxTime { a: NodeId, batch: usize },
    SumAll { a: NodeId },
    SumRows { a: NodeId },
    ConcatCols { a: NodeId, b: NodeId, bcast_b: bool },
    ConcatRows { xs: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    /// Extract sequences `offset..offset+len` of a time-major batch.
    SliceBatch { a: NodeId, batch: usize, offset: usize },
    /// Select sequences of a time-major batch by index (repeats allowed).
    GatherBatch { a: NodeId, batch: usize, sel: Vec<usize> },
    RepeatRows { a: NodeId, times: usize },
    TileRows { a: NodeId, times: usize },
    Transpose { a: NodeId },
    Reshape { a: NodeId },
    /// Gather rows of `a` by index (embedding lookup).
    GatherRows { a: NodeId, ids: Vec<usize> },
    /// context[b*q + j] = sum_t p[t*B+b, j] * h[t*B+b, :]
    AttendTime { h: NodeId, p: NodeId, batch: usize },
    /// Row-stack a column window of several equal-width inputs (assembles
    /// per-step hidden states into a sequence without per-step slices).
    ConcatRowsCols {
        xs: Vec<NodeId>,
        col_start: usize,
    },
    /// Fused LSTM cell step on a batch of B rows. Inputs: a `B`-row window
    /// of the precomputed input projections at `row_start` (`B x 4h` within
    /// `preact`), previous `[h ‖ c]` state `[B x 2h]`, recurrent weights
    /// `u` `[h x 4h]`. Output: next `[h ‖ c]` `[B x 2h]`.
    /// Gate order inside the 4h block: input, forget, cell, output.
    LstmStep {
        preact: NodeId,
        row_start: usize,
        hc: NodeId,
        u: NodeId,
        hidden: usize,
    },
}

// ── Tape ─────────────────────────────────────────────────────────────

enum NodeVal {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl NodeVal {
    fn tensor(&self) -> &Tensor {
        match self {
            NodeVal::Owned(t) => t,
            NodeVal::Shared(t) => t,
        }
    }
}

/// Records one computation graph. Operations execute eagerly; `backward`
/// walks the recorded list in reverse (the recording order is already
/// topological: every operation's inputs precede it).
pub struct Tape {
    vals: Vec<NodeVal>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    /// Buffers kept for backward (LSTM gates); not filled in inference mode.
    saved: Vec<Option<Vec<f64>>>,
    needs_grad: Vec<bool>,
    training: bool,
}

impl Tape {
    /// A tape that retains what backward needs.
    pub fn new() -> Self {
        Tape::with_mode(true)
    }

    /// Inference-only tape: skips buffers that exist solely for backward.
    pub fn inference() -> Self {
        Tape::with_mode(false)
    }

    fn with_mode(training: bool) -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            saved: Vec::new(),
            needs_grad: Vec::new(),
            training,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.vals[id].tensor()
    }

    /// Gradient of a node after `backward`, if one was propagated to it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool, saved: Option<Vec<f64>>) -> NodeId {
        let id = self.vals.len();
        self.vals.push(NodeVal::Owned(value));
        self.ops.push(op);
        self.grads.push(None);
        self.saved.push(saved);
        self.needs_grad.push(needs);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs_grad[id]
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Constant input (no gradient).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false, None)
    }

    /// Differentiable non-parameter input.
    pub fn var(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Var, true, None)
    }

    /// Parameter leaf. Shares the store's value; gradient flows back into
    /// the store only for trainable parameters.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        let nid = self.vals.len();
        self.vals.push(NodeVal::Shared(p.value.clone()));
        self.ops.push(Op::Param { id });
        self.grads.push(None);
        self.saved.push(None);
        self.needs_grad.push(p.trainable);
        nid
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_nn(ta.data(), m, k, tb.data(), n, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(m, n, out), Op::Matmul { a, b }, needs, None))
    }

    /// Elementwise sum. The right operand may be a row block whose row
    /// count divides the left's (it is tiled cyclically), covering both
    /// bias rows (1xq) and per-sequence terms of a time-major batch.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast = if ta.rows() == tb.rows() && ta.cols() == tb.cols() {
            AddBcast::Same
        } else if ta.cols() == tb.cols() && tb.rows() > 0 && ta.rows() % tb.rows() == 0 {
            AddBcast::Tile
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        };
        let (rows, cols) = (ta.rows(), ta.cols());
        let brows = tb.rows();
        let mut out = Vec::with_capacity(rows * cols);
        match bcast {
            AddBcast::Same => {
                out.extend(ta.data().iter().zip(tb.data()).map(|(x, y)| x + y));
            }
            AddBcast::Tile => {
                for r in 0..rows {
                    let br = tb.row(r % brows);
                    let ar = ta.row(r);
                    for c in 0..cols {
                        out.push(ar[c] + br[c]);
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(rows, cols, out), Op::Add { a, b, bcast }, needs, None))
    }

    /// Elementwise product; `b` may be a 1x1 scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let scalar = tb.is_scalar() && !ta.is_scalar();
        if !scalar && (ta.rows() != tb.rows() || ta.cols() != tb.cols()) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        }
        let out: Vec<f64> = if scalar {
            let s = tb.item();
            ta.data().iter().map(|x| x * s).collect()
        } else {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(ta.rows(), ta.cols(), out),
            Op::Mul { a, b },
            needs,
            None,
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), out);
        let needs = self.needs(a);
        self.push(t, Op::Scale { a, c }, needs, None)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x + c).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), out);
        let needs = self.needs(a);
        self.push(t, Op::AddConst { a }, needs, None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), out);
        let needs = self.needs(a);
        self.push(t, Op::Sigmoid { a }, needs, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), out);
        let needs = self.needs(a);
        self.push(t, Op::Tanh { a }, needs, None)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), out);
        let needs = self.needs(a);
        self.push(t, Op::Ln { a }, needs, None)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(ta.rows(), ta.cols(), out);
        let needs = self.needs(a);
        self.push(t, Op::Clamp { a, lo, hi }, needs, None)
    }

    /// Softmax over a vector (1xN or Nx1), computed with max-subtraction.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rows() != 1 && ta.cols() != 1 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                lhs: ta.shape_str(),
                rhs: "vector".into(),
            });
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let col = self.reshape(a, rows * cols, 1)?;
        let sm = self.softmax_time(col, 1)?;
        self.reshape(sm, rows, cols)
    }

    /// Column-wise softmax over the time axis of a time-major `(n*B) x q`
    /// matrix: each (sequence, column) group of n entries becomes a
    /// probability distribution.
    pub fn softmax_time(&mut self, a: NodeId, batch: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        if batch == 0 || rows % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_time",
                lhs: ta.shape_str(),
                rhs: format!("batch {batch}"),
            });
        }
        let n = rows / batch;
        let mut out = vec![0.0; rows * cols];
        let data = ta.data();
        for b in 0..batch {
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for t in 0..n {
                    max = max.max(data[(t * batch + b) * cols + c]);
                }
                let mut sum = 0.0;
                for t in 0..n {
                    let idx = (t * batch + b) * cols + c;
                    let e = (data[idx] - max).exp();
                    out[idx] = e;
                    sum += e;
                }
                for t in 0..n {
                    out[(t * batch + b) * cols + c] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(rows, cols, out),
            Op::SoftmaxTime { a, batch },
            needs,
            None,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, needs, None)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let out: Vec<f64> = (0..ta.rows()).map(|r| ta.row(r).iter().sum()).collect();
        let t = Tensor::new(ta.rows(), 1, out);
        let needs = self.needs(a);
        self.push(t, Op::SumRows { a }, needs, None)
    }

    /// Row-wise concatenation along the feature axis. A 1xq right operand
    /// is broadcast to the left operand's row count first.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bcast_b = tb.rows() == 1 && ta.rows() > 1;
        if !bcast_b && ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: ta.shape_str(),
                rhs: tb.shape_str(),
            });
        }
        let (rows, pa, pb) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(rows * (pa + pb));
        for r in 0..rows {
            out.extend_from_slice(ta.row(r));
            out.extend_from_slice(tb.row(if bcast_b { 0 } else { r }));
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(rows, pa + pb, out),
            Op::ConcatCols { a, b, bcast_b },
            needs,
            None,
        ))
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptySequence { what: "concat_rows" });
        }
        let cols = self.value(xs[0]).cols();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: format!("{cols} cols"),
                    rhs: t.shape_str(),
                });
            }
            rows += t.rows();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &x in xs {
            out.extend_from_slice(self.value(x).data());
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::new(rows, cols, out),
            Op::ConcatRows { xs: xs.to_vec() },
            needs,
            None,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if start + len > ta.rows() {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: ta.shape_str(),
                rhs: format!("rows {start}..{}", start + len),
            });
        }
        let cols = ta.cols();
        let out = ta.data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(len, cols, out),
            Op::SliceRows { a, start },
            needs,
            None,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: ta.shape_str(),
                rhs: format!("cols {start}..{}", start + len),
            });
        }
        let rows = ta.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let row = ta.row(r);
            out.extend_from_slice(&row[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(rows, len, out),
            Op::SliceCols { a, start },
            needs,
            None,
        ))
    }

    /// Extract sequences `offset..offset+len` from a time-major batch of
    /// `batch` sequences, preserving the time-major layout.
    pub fn slice_batch(
        &mut self,
        a: NodeId,
        batch: usize,
        offset: usize,
        len: usize,
    ) -> Result<NodeId> {
        let ta = self.value(a);
        let rows = ta.rows();
        if batch == 0 || rows % batch != 0 || offset + len > batch {
            return Err(Error::ShapeMismatch {
                op: "slice_batch",
                lhs: ta.shape_str(),
                rhs: format!("batch {batch} offset {offset} len {len}"),
            });
        }
        let (n, cols) = (rows / batch, ta.cols());
        let mut out = Vec::with_capacity(n * len * cols);
        for t in 0..n {
            let start = (t * batch + offset) * cols;
            out.extend_from_slice(&ta.data()[start..start + len * cols]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(n * len, cols, out),
            Op::SliceBatch { a, batch, offset },
            needs,
            None,
        ))
    }

    /// Re-batch a time-major batch: output sequence j is input sequence
    /// `sel[j]`. Indices may repeat, which broadcasts one sequence to many
    /// batch lanes without recomputing it.
    pub fn gather_batch(&mut self, a: NodeId, batch: usize, sel: &[usize]) -> Result<NodeId> {
        let ta = self.value(a);
        let rows = ta.rows();
        if batch == 0 || rows % batch != 0 || sel.iter().any(|&s| s >= batch) {
            return Err(Error::ShapeMismatch {
                op: "gather_batch",
                lhs: ta.shape_str(),
                rhs: format!("batch {batch} sel len {}", sel.len()),
            });
        }
        if sel.is_empty() {
            return Err(Error::EmptySequence {
                what: "gather_batch",
            });
        }
        let (n, cols) = (rows / batch, ta.cols());
        let bout = sel.len();
        let mut out = Vec::with_capacity(n * bout * cols);
        for t in 0..n {
            for &s in sel {
                out.extend_from_slice(ta.row(t * batch + s));
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(n * bout, cols, out),
            Op::GatherBatch {
                a,
                batch,
                sel: sel.to_vec(),
            },
            needs,
            None,
        ))
    }

    /// Repeat each row `times` times consecutively ([a;b] -> [a;a;b;b]).
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(ta.row(r));
            }
        }
        let t = Tensor::new(rows * times, cols, out);
        let needs = self.needs(a);
        self.push(t, Op::RepeatRows { a, times }, needs, None)
    }

    /// Repeat the whole matrix `times` times vertically ([a;b] -> [a;b;a;b]).
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(rows * times * cols);
        for _ in 0..times {
            out.extend_from_slice(ta.data());
        }
        let t = Tensor::new(rows * times, cols, out);
        let needs = self.needs(a);
        self.push(t, Op::TileRows { a, times }, needs, None)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = ta.get(r, c);
            }
        }
        let t = Tensor::new(cols, rows, out);
        let needs = self.needs(a);
        self.push(t, Op::Transpose { a }, needs, None)
    }

    /// Reinterpret the row-major data under a new shape with equal size.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.numel() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape_str(),
                rhs: format!("{rows}x{cols}"),
            });
        }
        let t = Tensor::new(rows, cols, ta.data().to_vec());
        let needs = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, needs, None))
    }

    /// Gather rows of `a` by index (embedding lookup). Indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::EmptySequence { what: "gather_rows" });
        }
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &r in ids {
            if r >= ta.rows() {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: ta.shape_str(),
                    rhs: format!("row index {r}"),
                });
            }
            out.extend_from_slice(ta.row(r));
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(ids.len(), cols, out),
            Op::GatherRows { a, ids: ids.to_vec() },
            needs,
            None,
        ))
    }

    /// Attention pooling on a time-major batch: the output row `b*q + j`
    /// is `sum_t p[t*B+b, j] * h[t*B+b, :]`. With q = 1 this is the plain
    /// context vector per sequence.
    pub fn attend_time(&mut self, h: NodeId, p: NodeId, batch: usize) -> Result<NodeId> {
        let (th, tp) = (self.value(h), self.value(p));
        if th.rows() != tp.rows() || batch == 0 || th.rows() % batch != 0 {
            return Err(Error::ShapeMismatch {
                op: "attend_time",
                lhs: th.shape_str(),
                rhs: tp.shape_str(),
            });
        }
        let n = th.rows() / batch;
        let (d, q) = (th.cols(), tp.cols());
        let mut out = vec![0.0; batch * q * d];
        for t in 0..n {
            for b in 0..batch {
                let hrow = th.row(t * batch + b);
                let prow = tp.row(t * batch + b);
                for j in 0..q {
                    let w = prow[j];
                    let orow = &mut out[(b * q + j) * d..(b * q + j + 1) * d];
                    for c in 0..d {
                        orow[c] += w * hrow[c];
                    }
                }
            }
        }
        let needs = self.needs(h) || self.needs(p);
        Ok(self.push(
            Tensor::new(batch * q, d, out),
            Op::AttendTime { h, p, batch },
            needs,
            None,
        ))
    }

    /// Row-stack a column window of several inputs: output rows are the
    /// `[col_start, col_start+col_len)` columns of each input in turn.
    pub fn concat_rows_col_window(
        &mut self,
        xs: &[NodeId],
        col_start: usize,
        col_len: usize,
    ) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptySequence {
                what: "concat_rows_col_window",
            });
        }
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if col_start + col_len > t.cols() {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows_col_window",
                    lhs: t.shape_str(),
                    rhs: format!("cols {col_start}..{}", col_start + col_len),
                });
            }
            rows += t.rows();
        }
        let mut out = Vec::with_capacity(rows * col_len);
        for &x in xs {
            let t = self.value(x);
            for r in 0..t.rows() {
                out.extend_from_slice(&t.row(r)[col_start..col_start + col_len]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(
            Tensor::new(rows, col_len, out),
            Op::ConcatRowsCols {
                xs: xs.to_vec(),
                col_start,
            },
            needs,
            None,
        ))
    }

    /// One fused LSTM step over a `batch`-row window of the input
    /// projections starting at `row_start` (see `Op::LstmStep`).
    pub fn lstm_step(
        &mut self,
        preact: NodeId,
        row_start: usize,
        batch: usize,
        hc: NodeId,
        u: NodeId,
        hidden: usize,
    ) -> Result<NodeId> {
        let (tpre, thc, tu) = (self.value(preact), self.value(hc), self.value(u));
        let b = batch;
        if tpre.cols() != 4 * hidden
            || row_start + b > tpre.rows()
            || thc.rows() != b
            || thc.cols() != 2 * hidden
            || tu.rows() != hidden
            || tu.cols() != 4 * hidden
        {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                lhs: format!(
                    "preact {} rows {row_start}..{} hc {}",
                    tpre.shape_str(),
                    row_start + b,
                    thc.shape_str()
                ),
                rhs: format!("u {} hidden {hidden}", tu.shape_str()),
            });
        }
        // pre = preact window + h_prev * U
        let mut pre = tpre.data()[row_start * 4 * hidden..(row_start + b) * 4 * hidden].to_vec();
        {
            // h_prev is the left half of hc; gather it contiguously.
            let mut hprev = Vec::with_capacity(b * hidden);
            for r in 0..b {
                hprev.extend_from_slice(&thc.row(r)[..hidden]);
            }
            matmul_nn(&hprev, b, hidden, tu.data(), 4 * hidden, &mut pre);
        }
        let mut gates = vec![0.0; b * 4 * hidden];
        let mut out = vec![0.0; b * 2 * hidden];
        for r in 0..b {
            let prow = &pre[r * 4 * hidden..(r + 1) * 4 * hidden];
            let grow = &mut gates[r * 4 * hidden..(r + 1) * 4 * hidden];
            let cprev = &thc.row(r)[hidden..];
            let orow = &mut out[r * 2 * hidden..(r + 1) * 2 * hidden];
            for j in 0..hidden {
                let i = sigmoid(prow[j]);
                let f = sigmoid(prow[hidden + j]);
                let g = prow[2 * hidden + j].tanh();
                let o = sigmoid(prow[3 * hidden + j]);
                let c = f * cprev[j] + i * g;
                grow[j] = i;
                grow[hidden + j] = f;
                grow[2 * hidden + j] = g;
                grow[3 * hidden + j] = o;
                orow[j] = o * c.tanh();
                orow[hidden + j] = c;
            }
        }
        let saved = if self.training { Some(gates) } else { None };
        let needs = self.needs(preact) || self.needs(hc) || self.needs(u);
        Ok(self.push(
            Tensor::new(b, 2 * hidden, out),
            Op::LstmStep {
                preact,
                row_start,
                hc,
                u,
                hidden,
            },
            needs,
            saved,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Gradients of trainable parameters
    /// are added into the store (they keep accumulating across calls until
    /// `ParamStore::zero_grads`). Node gradients within this tape are reset
    /// on every call. Gradients scatter directly into each input's buffer,
    /// so slicing and gathering ops cost only their window size.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalar {
                op: "backward",
                shape: lt.shape_str(),
            });
        }
        if !self.training {
            return Err(Error::Numeric(
                "backward called on an inference-mode tape".into(),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);

        // Disjoint field borrows: ops/vals/saved are read, grads mutates.
        let Tape {
            vals,
            ops,
            grads,
            saved,
            needs_grad,
            ..
        } = self;

        for i in (0..=loss).rev() {
            if !needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &ops[i] {
                Op::Leaf => {}
                Op::Var => {
                    // Var keeps its gradient readable after the pass.
                    grads[i] = Some(g);
                }
                Op::Param { id } => {
                    if store.get(*id).trainable {
                        add_into(store.grad_mut(*id), &g);
                    }
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let t = vals[a].tensor();
                        (t.rows(), t.cols())
                    };
                    let n = vals[b].tensor().cols();
                    if needs_grad[a] {
                        let bd = vals[b].tensor();
                        matmul_nt(&g, m, n, bd.data(), k, buf(grads, vals, a));
                    }
                    if needs_grad[b] {
                        let ad = vals[a].tensor();
                        matmul_tn(ad.data(), m, k, &g, n, buf(grads, vals, b));
                    }
                }
                Op::Add { a, b, bcast } => {
                    let (a, b, bcast) = (*a, *b, *bcast);
                    if needs_grad[a] {
                        add_into(buf(grads, vals, a), &g);
                    }
                    if needs_grad[b] {
                        match bcast {
                            AddBcast::Same => add_into(buf(grads, vals, b), &g),
                            AddBcast::Tile => {
                                let (brows, cols) = {
                                    let t = vals[b].tensor();
                                    (t.rows(), t.cols())
                                };
                                let arows = vals[a].tensor().rows();
                                let db = buf(grads, vals, b);
                                for r in 0..arows {
                                    let dst = &mut db[(r % brows) * cols..(r % brows + 1) * cols];
                                    let src = &g[r * cols..(r + 1) * cols];
                                    for c in 0..cols {
                                        dst[c] += src[c];
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let scalar = vals[b].tensor().is_scalar() && !vals[a].tensor().is_scalar();
                    if scalar {
                        if needs_grad[a] {
                            let s = vals[b].tensor().item();
                            let da = buf(grads, vals, a);
                            for (d, gv) in da.iter_mut().zip(&g) {
                                *d += gv * s;
                            }
                        }
                        if needs_grad[b] {
                            let s: f64 = g
                                .iter()
                                .zip(vals[a].tensor().data())
                                .map(|(x, y)| x * y)
                                .sum();
                            buf(grads, vals, b)[0] += s;
                        }
                    } else {
                        if needs_grad[a] {
                            let bt = vals[b].tensor();
                            let da = buf(grads, vals, a);
                            for ((d, gv), bv) in da.iter_mut().zip(&g).zip(bt.data()) {
                                *d += gv * bv;
                            }
                        }
                        if needs_grad[b] {
                            let at = vals[a].tensor();
                            let db = buf(grads, vals, b);
                            for ((d, gv), av) in db.iter_mut().zip(&g).zip(at.data()) {
                                *d += gv * av;
                            }
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    let da = buf(grads, vals, a);
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv * c;
                    }
                }
                Op::AddConst { a } => add_into(buf(grads, vals, *a), &g),
                Op::Sigmoid { a } => {
                    let a = *a;
                    let y = vals[i].tensor();
                    let da = buf(grads, vals, a);
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let y = vals[i].tensor();
                    let da = buf(grads, vals, a);
                    for ((d, gv), yv) in da.iter_mut().zip(&g).zip(y.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Ln { a } => {
                    let a = *a;
                    let x = vals[a].tensor();
                    let da = buf(grads, vals, a);
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        *d += gv / xv;
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let (a, lo, hi) = (*a, *lo, *hi);
                    let x = vals[a].tensor();
                    let da = buf(grads, vals, a);
                    for ((d, gv), xv) in da.iter_mut().zip(&g).zip(x.data()) {
                        if *xv > lo && *xv < hi {
                            *d += gv;
                        }
                    }
                }
                Op::SoftmaxTime { a, batch } => {
                    let (a, batch) = (*a, *batch);
                    let y = vals[i].tensor();
                    let (rows, cols) = (y.rows(), y.cols());
                    let n = rows / batch;
                    let yd = y.data();
                    let da = buf(grads, vals, a);
                    for b in 0..batch {
                        for c in 0..cols {
                            let mut dot = 0.0;
                            for t in 0..n {
                                let idx = (t * batch + b) * cols + c;
                                dot += g[idx] * yd[idx];
                            }
                            for t in 0..n {
                                let idx = (t * batch + b) * cols + c;
                                da[idx] += yd[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                Op::SumAll { a } => {
                    let a = *a;
                    let da = buf(grads, vals, a);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::SumRows { a } => {
                    let a = *a;
                    let cols = vals[a].tensor().cols();
                    let da = buf(grads, vals, a);
                    for (r, gv) in g.iter().enumerate() {
                        for c in 0..cols {
                            da[r * cols + c] += gv;
                        }
                    }
                }
                Op::ConcatCols { a, b, bcast_b } => {
                    let (a, b, bcast_b) = (*a, *b, *bcast_b);
                    let pa = vals[a].tensor().cols();
                    let pb = vals[b].tensor().cols();
                    let rows = vals[i].tensor().rows();
                    if needs_grad[a] {
                        let da = buf(grads, vals, a);
                        for r in 0..rows {
                            let src = &g[r * (pa + pb)..r * (pa + pb) + pa];
                            let dst = &mut da[r * pa..(r + 1) * pa];
                            for c in 0..pa {
                                dst[c] += src[c];
                            }
                        }
                    }
                    if needs_grad[b] {
                        let db = buf(grads, vals, b);
                        for r in 0..rows {
                            let src = &g[r * (pa + pb) + pa..(r + 1) * (pa + pb)];
                            let dst = if bcast_b {
                                &mut db[..pb]
                            } else {
                                &mut db[r * pb..(r + 1) * pb]
                            };
                            for c in 0..pb {
                                dst[c] += src[c];
                            }
                        }
                    }
                }
                Op::ConcatRows { xs } => {
                    let xs = xs.clone();
                    let mut start = 0;
                    for x in xs {
                        let len = vals[x].tensor().numel();
                        if needs_grad[x] {
                            add_into(buf(grads, vals, x), &g[start..start + len]);
                        }
                        start += len;
                    }
                }
                Op::ConcatRowsCols { xs, col_start } => {
                    let (xs, col_start) = (xs.clone(), *col_start);
                    let col_len = vals[i].tensor().cols();
                    let mut out_row = 0;
                    for x in xs {
                        let (rows, cols) = {
                            let t = vals[x].tensor();
                            (t.rows(), t.cols())
                        };
                        if needs_grad[x] {
                            let dx = buf(grads, vals, x);
                            for r in 0..rows {
                                let src = &g[(out_row + r) * col_len..(out_row + r + 1) * col_len];
                                let dst = &mut dx[r * cols + col_start..r * cols + col_start + col_len];
                                for c in 0..col_len {
                                    dst[c] += src[c];
                                }
                            }
                        }
                        out_row += rows;
                    }
                }
                Op::SliceRows { a, start } => {
                    let (a, start) = (*a, *start);
                    let cols = vals[a].tensor().cols();
                    let da = buf(grads, vals, a);
                    add_into(&mut da[start * cols..start * cols + g.len()], &g);
                }
                Op::SliceCols { a, start } => {
                    let (a, start) = (*a, *start);
                    let (rows, cols) = {
                        let t = vals[a].tensor();
                        (t.rows(), t.cols())
                    };
                    let len = vals[i].tensor().cols();
                    let da = buf(grads, vals, a);
                    for r in 0..rows {
                        let dst = &mut da[r * cols + start..r * cols + start + len];
                        let src = &g[r * len..(r + 1) * len];
                        for c in 0..len {
                            dst[c] += src[c];
                        }
                    }
                }
                Op::SliceBatch { a, batch, offset } => {
                    let (a, batch, offset) = (*a, *batch, *offset);
                    let (rows, cols) = {
                        let t = vals[a].tensor();
                        (t.rows(), t.cols())
                    };
                    let n = rows / batch;
                    let len = vals[i].tensor().rows() / n;
                    let da = buf(grads, vals, a);
                    for t in 0..n {
                        let dst = &mut da[(t * batch + offset) * cols..][..len * cols];
                        let src = &g[t * len * cols..(t + 1) * len * cols];
                        add_into(dst, src);
                    }
                }
                Op::GatherBatch { a, batch, sel } => {
                    let (a, batch) = (*a, *batch);
                    let (rows, cols) = {
                        let t = vals[a].tensor();
                        (t.rows(), t.cols())
                    };
                    let n = rows / batch;
                    let bout = sel.len();
                    let sel = sel.clone();
                    let da = buf(grads, vals, a);
                    for t in 0..n {
                        for (j, &s) in sel.iter().enumerate() {
                            let dst = &mut da[(t * batch + s) * cols..(t * batch + s + 1) * cols];
                            let src = &g[(t * bout + j) * cols..(t * bout + j + 1) * cols];
                            for c in 0..cols {
                                dst[c] += src[c];
                            }
                        }
                    }
                }
                Op::RepeatRows { a, times } => {
                    let (a, times) = (*a, *times);
                    let (rows, cols) = {
                        let t = vals[a].tensor();
                        (t.rows(), t.cols())
                    };
                    let da = buf(grads, vals, a);
                    for r in 0..rows {
                        let dst = &mut da[r * cols..(r + 1) * cols];
                        for rep in 0..times {
                            let src = &g[(r * times + rep) * cols..(r * times + rep + 1) * cols];
                            for c in 0..cols {
                                dst[c] += src[c];
                            }
                        }
                    }
                }
                Op::TileRows { a, times } => {
                    let (a, times) = (*a, *times);
                    let size = vals[a].tensor().numel();
                    let da = buf(grads, vals, a);
                    for rep in 0..times {
                        add_into(da, &g[rep * size..(rep + 1) * size]);
                    }
                }
                Op::Transpose { a } => {
                    let a = *a;
                    let (rows, cols) = {
                        let t = vals[a].tensor();
                        (t.rows(), t.cols())
                    };
                    let da = buf(grads, vals, a);
                    // g has shape cols x rows
                    for r in 0..cols {
                        for c in 0..rows {
                            da[c * cols + r] += g[r * rows + c];
                        }
                    }
                }
                Op::Reshape { a } => add_into(buf(grads, vals, *a), &g),
                Op::GatherRows { a, ids } => {
                    let a = *a;
                    let cols = vals[a].tensor().cols();
                    let ids = ids.clone();
                    let da = buf(grads, vals, a);
                    for (j, &r) in ids.iter().enumerate() {
                        let dst = &mut da[r * cols..(r + 1) * cols];
                        let src = &g[j * cols..(j + 1) * cols];
                        for c in 0..cols {
                            dst[c] += src[c];
                        }
                    }
                }
                Op::AttendTime { h, p, batch } => {
                    let (h, p, batch) = (*h, *p, *batch);
                    let n = vals[h].tensor().rows() / batch;
                    let d = vals[h].tensor().cols();
                    let q = vals[p].tensor().cols();
                    if needs_grad[h] {
                        // dh[row] += sum_j p[row, j] * g[b*q+j]
                        let pt = vals[p].tensor();
                        let dh = buf(grads, vals, h);
                        for t in 0..n {
                            for b in 0..batch {
                                let row = t * batch + b;
                                let dst = &mut dh[row * d..(row + 1) * d];
                                for j in 0..q {
                                    let w = pt.get(row, j);
                                    let go = &g[(b * q + j) * d..(b * q + j + 1) * d];
                                    for c in 0..d {
                                        dst[c] += w * go[c];
                                    }
                                }
                            }
                        }
                    }
                    if needs_grad[p] {
                        let ht = vals[h].tensor();
                        let dp = buf(grads, vals, p);
                        for t in 0..n {
                            for b in 0..batch {
                                let row = t * batch + b;
                                let hrow = ht.row(row);
                                for j in 0..q {
                                    let go = &g[(b * q + j) * d..(b * q + j + 1) * d];
                                    let mut s = 0.0;
                                    for c in 0..d {
                                        s += go[c] * hrow[c];
                                    }
                                    dp[row * q + j] += s;
                                }
                            }
                        }
                    }
                }
                Op::LstmStep {
                    preact,
                    row_start,
                    hc,
                    u,
                    hidden,
                } => {
                    let (preact, row_start, hc, u, hidden) =
                        (*preact, *row_start, *hc, *u, *hidden);
                    let gates = saved[i].take().expect("training tape keeps LSTM gates");
                    let b = vals[i].tensor().rows();
                    let out = vals[i].tensor().data();
                    let thc = vals[hc].tensor();
                    let tu = vals[u].tensor();
                    // gate pre-activation gradients, then chain to inputs
                    let mut dpre = vec![0.0; b * 4 * hidden];
                    let mut dhc = vec![0.0; b * 2 * hidden];
                    for r in 0..b {
                        let grow = &gates[r * 4 * hidden..(r + 1) * 4 * hidden];
                        let orow = &out[r * 2 * hidden..(r + 1) * 2 * hidden];
                        let gout = &g[r * 2 * hidden..(r + 1) * 2 * hidden];
                        let cprev = &thc.row(r)[hidden..];
                        let dprow = &mut dpre[r * 4 * hidden..(r + 1) * 4 * hidden];
                        let dhcrow = &mut dhc[r * 2 * hidden..(r + 1) * 2 * hidden];
                        for j in 0..hidden {
                            let (iv, fv, gv, ov) = (
                                grow[j],
                                grow[hidden + j],
                                grow[2 * hidden + j],
                                grow[3 * hidden + j],
                            );
                            let c = orow[hidden + j];
                            let tc = c.tanh();
                            let dh = gout[j];
                            // dc = incoming dc (from the next step) + via h
                            let dc = gout[hidden + j] + dh * ov * (1.0 - tc * tc);
                            let do_ = dh * tc;
                            let di = dc * gv;
                            let dg = dc * iv;
                            let df = dc * cprev[j];
                            dhcrow[hidden + j] = dc * fv; // d c_prev
                            dprow[j] = di * iv * (1.0 - iv);
                            dprow[hidden + j] = df * fv * (1.0 - fv);
                            dprow[2 * hidden + j] = dg * (1.0 - gv * gv);
                            dprow[3 * hidden + j] = do_ * ov * (1.0 - ov);
                        }
                    }
                    // dh_prev = dpre * U^T into the left half of dhc
                    {
                        let mut dh_prev = vec![0.0; b * hidden];
                        matmul_nt(&dpre, b, 4 * hidden, tu.data(), hidden, &mut dh_prev);
                        for r in 0..b {
                            let dst = &mut dhc[r * 2 * hidden..r * 2 * hidden + hidden];
                            dst.copy_from_slice(&dh_prev[r * hidden..(r + 1) * hidden]);
                        }
                    }
                    if needs_grad[u] {
                        let mut hprev = Vec::with_capacity(b * hidden);
                        for r in 0..b {
                            hprev.extend_from_slice(&thc.row(r)[..hidden]);
                        }
                        matmul_tn(&hprev, b, hidden, &dpre, 4 * hidden, buf(grads, vals, u));
                    }
                    if needs_grad[hc] {
                        add_into(buf(grads, vals, hc), &dhc);
                    }
                    if needs_grad[preact] {
                        let da = buf(grads, vals, preact);
                        add_into(
                            &mut da[row_start * 4 * hidden..(row_start + b) * 4 * hidden],
                            &dpre,
                        );
                    }
                    saved[i] = Some(gates);
                }
            }
        }
        Ok(())
    }
}

/// Lazily allocated gradient buffer of one node.
fn buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    vals: &[NodeVal],
    id: NodeId,
) -> &'a mut [f64] {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; vals[id].tensor().numel()]);
    }
    grads[id].as_mut().unwrap()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable scalar sigmoid, exposed for non-tape callers.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

// ── Finite-difference gradient checking ──────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub pass: bool,
    /// Set when the loss function produced a non-finite value.
    pub non_finite: bool,
}

/// Compare the analytic gradients already accumulated in `store` against
/// central finite differences of `f`. For each trainable entry theta this
/// evaluates `(f(theta+eps) - f(theta-eps)) / (2 eps)` and accepts when
/// `|analytic - numeric| <= max(tol * max(|analytic|, |numeric|), abs_floor)`.
/// A non-finite loss is reported, not propagated as a panic.
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    eps: f64,
    tol: f64,
    abs_floor: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    assert!(eps > 0.0, "grad_check needs a positive eps");
    let mut entries = Vec::new();
    let mut max_rel = 0.0f64;
    let mut all_pass = true;
    let mut non_finite = false;

    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let n = store.value(id).numel();
        let mut entry_rel = 0.0f64;
        let mut entry_pass = true;
        for j in 0..n {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let fp = f(store);
            store.value_mut(id).data_mut()[j] = orig - eps;
            let fm = f(store);
            store.value_mut(id).data_mut()[j] = orig;
            let (fp, fm) = match (fp, fm) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                _ => {
                    non_finite = true;
                    entry_pass = false;
                    entry_rel = f64::INFINITY;
                    continue;
                }
            };
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = store.grad(id)[j];
            let denom = analytic.abs().max(numeric.abs());
            let diff = (analytic - numeric).abs();
            let rel = if denom > 0.0 { diff / denom } else { 0.0 };
            entry_rel = entry_rel.max(rel);
            if diff > (tol * denom).max(abs_floor) {
                entry_pass = false;
            }
        }
        max_rel = max_rel.max(entry_rel);
        all_pass &= entry_pass;
        entries.push(GradCheckEntry {
            name,
            max_rel_err: entry_rel,
            pass: entry_pass,
        });
    }
    GradCheckReport {
        entries,
        max_rel_err: max_rel,
        pass: all_pass && !non_finite,
        non_finite,
    }
}

// ── Tests ────────────────────────────────────────────────────────────
