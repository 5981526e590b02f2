//! Reverse-mode differentiation over an explicit tape of matrix operations.
//!
//! A [`Graph`] borrows a [`ParamStore`] and records every operation applied
//! to its [`Var`] handles. Parameters enter the tape through
//! [`Graph::param`] without being copied. Forward values are computed by
//! the same kernels whether or not recording is on; recording only keeps
//! what the adjoint rules need. [`Graph::backward`] consumes the tape, so
//! each forward pass is differentiated at most once, and gradients reaching
//! a node along several paths are summed.

use crate::counter::{self, Category};
use crate::error::{Error, Result};
use crate::kernels::{self, HeadLayout, Segments};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_into, layer_norm_raw, Matrix};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Param(ParamId),
    Owned(Matrix),
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax { a: Var, scale: f64 },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Matrix, inv: Vec<f64> },
    EluPlusOne(Var),
    Relu(Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { a: Var, start: usize },
    MemoryRead { alpha: Var, a: Var, b: Var, seg: Segments },
    CausalMemoryRead { alpha: Var, a: Var, b: Var, count: usize, len: usize },
    SoftmaxAttention { q: Var, k: Var, v: Var, seg: Segments, lay: HeadLayout, probs: Vec<f64> },
    LinearAttention { q: Var, k: Var, v: Var, seg: Segments, lay: HeadLayout },
    SmoothedCrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Matrix, count: usize },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Recording tape over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    record: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Matrix>>,
    params: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a trainable parameter, `None` if it did not influence
    /// the output or is frozen.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[Option<Matrix>] {
        &self.params
    }
}

impl<'s> Graph<'s> {
    /// A recording graph.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            record: true,
        }
    }

    /// A graph that evaluates forward values only.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            record: false,
            ..Self::new(store)
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Param(id) => self.store.get(*id),
            Value::Owned(m) => m,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.record && parents.iter().any(|&p| self.needs(p));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf whose gradient is reported by [`Gradients::var`].
    pub fn input(&mut self, m: Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(m),
            op: Op::Leaf,
            needs_grad: self.record,
        });
        Var(self.nodes.len() - 1)
    }

    /// The (memoized) tape handle of a stored parameter. Frozen parameters
    /// behave as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: self.record && self.store.is_trainable(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn gemm(&mut self, op: &'static str, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = crate::tensor::gemm(op, self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm("matmul", a, false, b, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm("matmul_nt", a, false, b, true)
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm("matmul_tn", a, true, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Broadcast-adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var, scale: f64) -> Result<Var> {
        let out = crate::tensor::softmax_rows(self.value(a), scale)?;
        Ok(self.push(out, Op::Softmax { a, scale }, &[a]))
    }

    /// Layer normalization per row; `gain` and `bias` are `1 x cols`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (g, b) = (self.value(gain), self.value(bias));
        if g.rows() != 1 || b.rows() != 1 {
            return Err(Error::Shape {
                op: "layer_norm",
                left: g.shape(),
                right: b.shape(),
            });
        }
        let (y, xhat, inv) = layer_norm_raw(self.value(a), g.data(), b.data(), eps)?;
        let (xhat, inv) = if self.record { (xhat, inv) } else { (Matrix::zeros(1, 1), Vec::new()) };
        Ok(self.push(y, Op::LayerNorm { a, gain, bias, xhat, inv }, &[a, gain, bias]))
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let out = crate::tensor::elu_plus_one(self.value(a));
        self.push(out, Op::EluPlusOne(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = crate::tensor::relu(self.value(a));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).select_rows(ids)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows { a, start }, &[a]))
    }

    /// Per segment: `alpha_s (a_s^T b_s) / sqrt(m)`.
    pub fn memory_read(&mut self, alpha: Var, a: Var, b: Var, seg: Segments) -> Result<Var> {
        let (al, av, bv) = (self.value(alpha), self.value(a), self.value(b));
        seg.check("memory_read", al.rows(), av.rows())?;
        if al.cols() != av.cols() || av.rows() != bv.rows() {
            return Err(Error::Shape {
                op: "memory_read",
                left: al.shape(),
                right: av.shape(),
            });
        }
        let (k, d) = (av.cols(), bv.cols());
        let out = kernels::memory_read(al.data(), av.data(), bv.data(), k, d, seg);
        let out = Matrix::new(seg.count * seg.n, d, out)?;
        Ok(self.push(out, Op::MemoryRead { alpha, a, b, seg }, &[alpha, a, b]))
    }

    /// Per segment of `len` rows: `alpha_i (sum_{j<=i} a_j^T b_j) / sqrt(i+1)`.
    pub fn causal_memory_read(&mut self, alpha: Var, a: Var, b: Var, count: usize, len: usize) -> Result<Var> {
        let (al, av, bv) = (self.value(alpha), self.value(a), self.value(b));
        Segments { count, n: len, m: len }.check("causal_memory_read", al.rows(), av.rows())?;
        if al.shape() != av.shape() || av.rows() != bv.rows() {
            return Err(Error::Shape {
                op: "causal_memory_read",
                left: al.shape(),
                right: av.shape(),
            });
        }
        let (k, d) = (av.cols(), bv.cols());
        let out = kernels::causal_memory_read(al.data(), av.data(), bv.data(), k, d, count, len);
        let out = Matrix::new(count * len, d, out)?;
        Ok(self.push(out, Op::CausalMemoryRead { alpha, a, b, count, len }, &[alpha, a, b]))
    }

    fn check_heads(&self, op: &'static str, q: Var, k: Var, v: Var, seg: Segments, heads: usize, causal: bool) -> Result<HeadLayout> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        seg.check(op, qv.rows(), kv.rows())?;
        if qv.cols() != kv.cols() || kv.shape() != vv.shape() {
            return Err(Error::Shape {
                op,
                left: qv.shape(),
                right: kv.shape(),
            });
        }
        if heads == 0 || qv.cols() % heads != 0 {
            return Err(Error::invalid(op, format!("{} columns over {heads} heads", qv.cols())));
        }
        if causal && seg.n != seg.m {
            return Err(Error::invalid(op, "causal attention needs equal query and key lengths"));
        }
        Ok(HeadLayout {
            heads,
            head_dim: qv.cols() / heads,
            causal,
        })
    }

    /// Multi-head scaled dot-product attention with concatenated heads.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, seg: Segments, heads: usize, causal: bool) -> Result<Var> {
        let lay = self.check_heads("softmax_attention", q, k, v, seg, heads, causal)?;
        let keep = self.record && (self.needs(q) || self.needs(k) || self.needs(v));
        let (out, probs) = kernels::softmax_attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            seg,
            lay,
            keep,
        );
        let out = Matrix::new(seg.count * seg.n, self.value(q).cols(), out)?;
        Ok(self.push(out, Op::SoftmaxAttention { q, k, v, seg, lay, probs }, &[q, k, v]))
    }

    /// Kernelized attention on featurized (positive) queries and keys.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, seg: Segments, heads: usize, causal: bool) -> Result<Var> {
        let lay = self.check_heads("linear_attention", q, k, v, seg, heads, causal)?;
        let out = kernels::linear_attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), seg, lay)?;
        let out = Matrix::new(seg.count * seg.n, self.value(q).cols(), out)?;
        Ok(self.push(out, Op::LinearAttention { q, k, v, seg, lay }, &[q, k, v]))
    }

    /// Mean label-smoothed cross-entropy over rows whose target is not
    /// `pad`. The target class gets `1 - smoothing`, every other class
    /// `smoothing / (vocab - 1)`.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64, pad: Option<usize>) -> Result<Var> {
        let lg = self.value(logits);
        let (rows, vocab) = lg.shape();
        if targets.len() != rows {
            return Err(Error::invalid(
                "smoothed_cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if !(0.0..1.0).contains(&smoothing) || vocab < 2 {
            return Err(Error::invalid("smoothed_cross_entropy", format!("smoothing {smoothing}, vocab {vocab}")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid("smoothed_cross_entropy", format!("target {t} outside vocabulary of {vocab}")));
        }
        let probs = crate::tensor::softmax_rows(lg, 1.0)?;
        let off = smoothing / (vocab - 1) as f64;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut masked = targets.to_vec();
        for (r, t) in targets.iter().enumerate() {
            if Some(*t) == pad {
                masked[r] = usize::MAX;
                continue;
            }
            count += 1;
            let row = lg.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (c, &x) in row.iter().enumerate() {
                let q = if c == *t { 1.0 - smoothing } else { off };
                total -= q * (x - lse);
            }
        }
        if count == 0 {
            return Err(Error::Empty("smoothed_cross_entropy"));
        }
        let loss = Matrix::filled(1, 1, total / count as f64);
        Ok(self.push(
            loss,
            Op::SmoothedCrossEntropy {
                logits,
                targets: masked,
                smoothing,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Backpropagates from a `1 x 1` output.
    pub fn backward(self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::invalid("backward", format!("output shape {:?} is not scalar", self.shape(output))));
        }
        self.backward_with(output, Matrix::filled(1, 1, 1.0))
    }

    /// Backpropagates an explicit output adjoint.
    pub fn backward_with(self, output: Var, seed: Matrix) -> Result<Gradients> {
        if !self.record {
            return Err(Error::invalid("backward", "graph was built without recording"));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape {
                op: "backward",
                left: self.shape(output),
                right: seed.shape(),
            });
        }
        let _scope = counter::scope(Category::Other);
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if self.nodes[v.0].needs_grad {
                    params[pid] = grads[v.0].take();
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    // C = op(A) op(B): dop(A) = G op(B)^T
                    let ga = if *ta {
                        // A^T = dC op(B)^T  =>  dA = op(B) dC^T
                        let mut out = Matrix::zeros(av.rows(), av.cols());
                        gemm_into(bv, *tb, g, true, 0.0, &mut out);
                        out
                    } else {
                        let mut out = Matrix::zeros(av.rows(), av.cols());
                        gemm_into(g, false, bv, !*tb, 0.0, &mut out);
                        out
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = if *tb {
                        // dB = dC^T op(A)
                        let mut out = Matrix::zeros(bv.rows(), bv.cols());
                        gemm_into(g, true, av, *ta, 0.0, &mut out);
                        out
                    } else {
                        let mut out = Matrix::zeros(bv.rows(), bv.cols());
                        gemm_into(av, !*ta, g, false, 0.0, &mut out);
                        out
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.sum_rows());
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::Softmax { a, scale } => {
                let y = self.value(Var(idx));
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = scale * yv * (gv - dotp);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNorm { a, gain, bias, xhat, inv } => {
                let gv = self.value(*gain);
                let (rows, cols) = xhat.shape();
                if self.needs(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    self.accumulate(grads, *bias, g.sum_rows());
                }
                if self.needs(*a) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            let dh = g.get(r, c) * gv.get(0, c);
                            s1 += dh;
                            s2 += dh * xhat.get(r, c);
                        }
                        for c in 0..cols {
                            let dh = g.get(r, c) * gv.get(0, c);
                            dx.set(r, c, inv[r] * (dh - s1 / n - xhat.get(r, c) * s2 / n));
                        }
                    }
                    self.accumulate(grads, *a, dx);
                }
            }
            Op::EluPlusOne(a) => {
                let x = self.value(*a);
                let mut out = g.clone();
                for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                    if xv < 0.0 {
                        *o *= xv.exp();
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut out = g.clone();
                for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *o = 0.0;
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut out = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in out.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, out);
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let mut out = Matrix::zeros(av.rows(), av.cols());
                let cols = av.cols();
                out.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, out);
            }
            Op::MemoryRead { alpha, a, b, seg } => {
                let (al, av, bv) = (self.value(*alpha), self.value(*a), self.value(*b));
                let (dal, da, db) =
                    kernels::memory_read_backward(al.data(), av.data(), bv.data(), g.data(), av.cols(), bv.cols(), *seg);
                self.accumulate(grads, *alpha, Matrix::new(al.rows(), al.cols(), dal)?);
                self.accumulate(grads, *a, Matrix::new(av.rows(), av.cols(), da)?);
                self.accumulate(grads, *b, Matrix::new(bv.rows(), bv.cols(), db)?);
            }
            Op::CausalMemoryRead { alpha, a, b, count, len } => {
                let (al, av, bv) = (self.value(*alpha), self.value(*a), self.value(*b));
                let (dal, da, db) = kernels::causal_memory_read_backward(
                    al.data(),
                    av.data(),
                    bv.data(),
                    g.data(),
                    av.cols(),
                    bv.cols(),
                    *count,
                    *len,
                );
                self.accumulate(grads, *alpha, Matrix::new(al.rows(), al.cols(), dal)?);
                self.accumulate(grads, *a, Matrix::new(av.rows(), av.cols(), da)?);
                self.accumulate(grads, *b, Matrix::new(bv.rows(), bv.cols(), db)?);
            }
            Op::SoftmaxAttention { q, k, v, seg, lay, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) =
                    kernels::softmax_attention_backward(qv.data(), kv.data(), vv.data(), probs, g.data(), *seg, *lay);
                self.accumulate(grads, *q, Matrix::new(qv.rows(), qv.cols(), dq)?);
                self.accumulate(grads, *k, Matrix::new(kv.rows(), kv.cols(), dk)?);
                self.accumulate(grads, *v, Matrix::new(vv.rows(), vv.cols(), dv)?);
            }
            Op::LinearAttention { q, k, v, seg, lay } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) =
                    kernels::linear_attention_backward(qv.data(), kv.data(), vv.data(), g.data(), *seg, *lay);
                self.accumulate(grads, *q, Matrix::new(qv.rows(), qv.cols(), dq)?);
                self.accumulate(grads, *k, Matrix::new(kv.rows(), kv.cols(), dk)?);
                self.accumulate(grads, *v, Matrix::new(vv.rows(), vv.cols(), dv)?);
            }
            Op::SmoothedCrossEntropy { logits, targets, smoothing, probs, count } => {
                let vocab = probs.cols();
                let off = smoothing / (vocab - 1) as f64;
                let w = g.get(0, 0) / *count as f64;
                let mut out = Matrix::zeros(probs.rows(), vocab);
                for (r, &t) in targets.iter().enumerate() {
                    if t == usize::MAX {
                        continue;
                    }
                    for c in 0..vocab {
                        let q = if c == t { 1.0 - smoothing } else { off };
                        out.set(r, c, w * (probs.get(r, c) - q));
                    }
                }
                self.accumulate(grads, *logits, out);
            }
        }
        Ok(())
    }
}

/// Result of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every entry.
    pub max_rel_error: f64,
    /// Name of the parameter where the maximum occurred.
    pub worst: String,
    pub entries_checked: usize,
}

/// Central difference of a scalar function at `x`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs)?;
        xs[i] = orig - h;
        let fm = f(&xs)?;
        xs[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "central_difference",
                detail: format!("f at entry {i}"),
            });
        }
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the tape gradient of the scalar built by `f` with respect to every
/// parameter in `ids` against central differences with step `h`.
pub fn grad_check<F>(store: &ParamStore, ids: &[ParamId], h: f64, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::invalid("grad_check", format!("step {h} outside [1e-6, 1e-4]")));
    }
    let analytic = {
        let mut g = Graph::new(store);
        let out = f(&mut g)?;
        let v = g.value(out).get(0, 0);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "grad_check",
                detail: "objective".into(),
            });
        }
        g.backward(out)?
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries_checked: 0,
    };
    for &id in ids {
        let base = store.get(id).clone();
        let zero = Matrix::zeros(base.rows(), base.cols());
        let ana = analytic.param(id).unwrap_or(&zero).clone();
        let mut eval = |x: &[f64]| -> Result<f64> {
            work.assign(id, Matrix::new(base.rows(), base.cols(), x.to_vec())?)?;
            let mut g = Graph::inference(&work);
            let out = f(&mut g)?;
            Ok(g.value(out).get(0, 0))
        };
        let num = central_difference(&mut eval, base.data(), h)?;
        work.assign(id, base.clone())?;
        for (a, n) in ana.data().iter().zip(&num) {
            let e = relative_error(*a, *n);
            report.entries_checked += 1;
            if e >= report.max_rel_error {
                report.max_rel_error = e;
                report.worst = store.name(id).to_string();
            }
        }
    }
    Ok(report)
}
