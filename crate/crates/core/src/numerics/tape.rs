//! Reverse-mode differentiation over matrix-granular ops.
//!
//! A [`Tape`] records every op applied to [`Var`] handles together with the
//! activations its backward rule needs. [`Tape::backward`] walks the record
//! in reverse once and returns the gradients of every leaf created with
//! [`Tape::leaf`]. Leaves created with [`Tape::constant`] and everything
//! derived only from constants are skipped during the reverse sweep.

use std::cell::{Cell, Ref, RefCell};

use rand::{Rng, RngCore};

use super::tensor::{gemm, Tensor};
use super::NumericsError;

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
pub struct TapeOptions {
    /// Fail an op whose output holds NaN or ±Inf.
    pub check_finite: bool,
    /// Fault injection for the gradient checker: scales the left-operand
    /// gradient of every matmul by 1.5.
    pub corrupt_matmul_grad: bool,
}

impl Default for TapeOptions {
    fn default() -> Self {
        Self {
            check_finite: cfg!(debug_assertions),
            corrupt_matmul_grad: false,
        }
    }
}

/// Geometry of a fused multi-head attention call. Rows of the query matrix
/// are laid out sample-major (`sample * q_len + position`), likewise keys.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags, true for keys that may be attended.
    pub key_mask: Vec<bool>,
}

impl AttentionLayout {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, factor: f64 },
    DivScalar { a: Var, s: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embed { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    Reshape { a: Var },
    Softmax { a: Var },
    Dropout { a: Var, mask: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<f64>, keep: Option<Vec<f64>> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, scale: f64, probs: Vec<f64> },
    NormalizeRows { a: Var, norms: Vec<f64> },
    Pool { a: Var, segments: Vec<Vec<usize>>, kind: PoolKind, argmax: Vec<usize> },
    Sum { a: Var },
    ConcatRows { parts: Vec<Var> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    options: TapeOptions,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_options(TapeOptions::default())
    }

    pub fn with_options(options: TapeOptions) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
            options,
        }
    }

    pub fn options(&self) -> TapeOptions {
        self.options
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (a parameter).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push_raw(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.options.check_finite && !value.all_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// `a · b` with `b` a 2-D `[k, n]` matrix and `a` any `[.., k]` tensor.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
                return Err(mismatch("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
            Tensor::new(with_last(ta.shape(), n), out)?
        };
        self.push("matmul", value, Op::MatMul { a, b }, &[a, b])
    }

    /// `a · bᵀ` with `b` a 2-D `[n, k]` matrix.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if tb.shape().len() != 2 || ta.cols() != tb.cols() {
                return Err(mismatch("matmul_nt", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
            Tensor::new(with_last(ta.shape(), n), out)?
        };
        self.push("matmul_nt", value, Op::MatMulNt { a, b }, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.numel() != tb.numel() || ta.cols() != tb.cols() {
                return Err(mismatch("add", ta.shape(), tb.shape()));
            }
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(bias));
            if tb.numel() != ta.cols() {
                return Err(mismatch("add_row", ta.shape(), tb.shape()));
            }
            let c = ta.cols();
            let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % c]).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        };
        self.push("add_row", value, Op::AddRow { a, bias }, &[a, bias])
    }

    /// Multiplies by a constant. A factor of exactly zero cuts the branch out
    /// of the reverse sweep.
    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect())?
        };
        self.push("scale", value, Op::Scale { a, factor }, &[a])
    }

    /// Divides every element by a scalar node.
    pub fn div_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let value = {
            let (ta, ts) = (self.value(a), self.value(s));
            if !ts.is_scalar() {
                return Err(mismatch("div_scalar", ta.shape(), ts.shape()));
            }
            let d = ts.item();
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x / d).collect())?
        };
        self.push("div_scalar", value, Op::DivScalar { a, s }, &[a, s])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())?
        };
        self.push("gelu", value, Op::Gelu { a }, &[a])
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, xhat, inv_std) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let c = tx.cols();
            if tg.numel() != c || tb.numel() != c {
                return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
            }
            let rows = tx.rows();
            let mut xhat = vec![0.0; rows * c];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; rows * c];
            for r in 0..rows {
                let row = tx.row(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::new(tx.shape().to_vec(), out)?, xhat, inv_std)
        };
        self.push("layer_norm", value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Looks up `ids` in a `[vocab, d]` table; output shape is `prefix ++ [d]`.
    pub fn embed(&self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let value = {
            let tt = self.value(table);
            if tt.shape().len() != 2 || prefix.iter().product::<usize>() != ids.len() {
                return Err(mismatch("embed", tt.shape(), prefix));
            }
            let (vocab, d) = (tt.rows(), tt.cols());
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(NumericsError::IndexOutOfRange { op: "embed", index: id, bound: vocab });
                }
                out.extend_from_slice(tt.row(id));
            }
            let mut shape = prefix.to_vec();
            shape.push(d);
            Tensor::new(shape, out)?
        };
        self.push("embed", value, Op::Embed { table, ids: ids.to_vec() }, &[table])
    }

    /// Stacks the selected rows into a `[rows.len(), cols]` matrix.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            let c = ta.cols();
            if rows.is_empty() {
                return Err(NumericsError::EmptyInput { op: "gather_rows" });
            }
            let mut out = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                if r >= ta.rows() {
                    return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: r, bound: ta.rows() });
                }
                out.extend_from_slice(ta.row(r));
            }
            Tensor::new(vec![rows.len(), c], out)?
        };
        self.push("gather_rows", value, Op::GatherRows { a, rows: rows.to_vec() }, &[a])
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a }, &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, a: Var) -> Result<Var> {
        let value = {
            let ta = self.value(a);
            let c = ta.cols();
            let mut out = ta.data().to_vec();
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::new(ta.shape().to_vec(), out)?
        };
        self.push("softmax", value, Op::Softmax { a }, &[a])
    }

    /// Inverted dropout. Returns `a` unchanged when `p == 0`.
    pub fn dropout(&self, a: Var, p: f64, rng: &mut dyn RngCore) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let (value, mask) = {
            let ta = self.value(a);
            let mask = keep_mask(ta.numel(), p, rng);
            let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
            (Tensor::new(ta.shape().to_vec(), data)?, mask)
        };
        self.push("dropout", value, Op::Dropout { a, mask }, &[a])
    }

    /// Fused scaled dot-product multi-head attention. Masked keys are
    /// skipped entirely, so they influence neither the value nor the
    /// gradient of any query. `dropout` applies to the attention weights.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Var> {
        let (value, probs, keep) = {
            let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
            let d = tq.cols();
            let l = &layout;
            if tk.cols() != d
                || tv.cols() != d
                || l.heads == 0
                || d % l.heads != 0
                || tq.rows() != l.batch * l.q_len
                || tk.rows() != l.batch * l.k_len
                || tv.rows() != l.batch * l.k_len
                || l.key_mask.len() != l.batch * l.k_len
            {
                return Err(mismatch("attention", tq.shape(), tk.shape()));
            }
            let dh = d / l.heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let n_probs = l.batch * l.heads * l.q_len * l.k_len;
            let keep = match dropout {
                Some((p, rng)) if p > 0.0 => Some(keep_mask(n_probs, p, rng)),
                _ => None,
            };
            let mut probs = vec![0.0; n_probs];
            let mut out = vec![0.0; l.batch * l.q_len * d];
            let mut scores = vec![0.0; l.k_len];
            for b in 0..l.batch {
                for h in 0..l.heads {
                    let off = h * dh;
                    for i in 0..l.q_len {
                        let qi = &tq.row(b * l.q_len + i)[off..off + dh];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..l.k_len {
                            if l.allowed(b, i, j) {
                                let kj = &tk.row(b * l.k_len + j)[off..off + dh];
                                let s = dot(qi, kj) * scale;
                                scores[j] = s;
                                max = max.max(s);
                            }
                        }
                        if max == f64::NEG_INFINITY {
                            continue;
                        }
                        let base = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                        let mut total = 0.0;
                        for j in 0..l.k_len {
                            if l.allowed(b, i, j) {
                                let e = (scores[j] - max).exp();
                                probs[base + j] = e;
                                total += e;
                            }
                        }
                        let orow = &mut out[(b * l.q_len + i) * d + off..(b * l.q_len + i) * d + off + dh];
                        for j in 0..l.k_len {
                            if l.allowed(b, i, j) {
                                probs[base + j] /= total;
                                let w = probs[base + j] * keep.as_ref().map_or(1.0, |m| m[base + j]);
                                let vj = &tv.row(b * l.k_len + j)[off..off + dh];
                                for (o, x) in orow.iter_mut().zip(vj) {
                                    *o += w * x;
                                }
                            }
                        }
                    }
                }
            }
            (Tensor::new(with_last(tq.shape(), d), out)?, probs, keep)
        };
        self.push("attention", value, Op::Attention { q, k, v, layout, probs, keep }, &[q, k, v])
    }

    /// Softmax cross-entropy of each row of `logits` against its target
    /// class, via log-sum-exp. Rows with a `None` target are ignored;
    /// `Mean` divides by the number of counted rows.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>], reduction: Reduction) -> Result<Var> {
        let (value, scale, probs) = {
            let tl = self.value(logits);
            let c = tl.cols();
            if targets.len() != tl.rows() {
                return Err(mismatch("cross_entropy", tl.shape(), &[targets.len()]));
            }
            let count = targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                return Err(NumericsError::AllPadded);
            }
            let scale = match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / count as f64,
            };
            let mut probs = vec![0.0; tl.numel()];
            let mut terms = Vec::with_capacity(count);
            for (r, t) in targets.iter().enumerate() {
                let Some(t) = *t else { continue };
                if t >= c {
                    return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: t, bound: c });
                }
                let row = tl.row(r);
                let lse = log_sum_exp(row);
                terms.push(lse - row[t]);
                for j in 0..c {
                    probs[r * c + j] = (row[j] - lse).exp();
                }
            }
            (Tensor::scalar(sorted_sum(terms) * scale), scale, probs)
        };
        let targets = targets.to_vec();
        self.push("cross_entropy", value, Op::CrossEntropy { logits, targets, scale, probs }, &[logits])
    }

    /// Scales each row to unit L2 norm.
    pub fn normalize_rows(&self, a: Var) -> Result<Var> {
        let (value, norms) = {
            let ta = self.value(a);
            let c = ta.cols();
            let mut norms = Vec::with_capacity(ta.rows());
            let mut out = ta.data().to_vec();
            for row in out.chunks_mut(c) {
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n < ZERO_NORM {
                    return Err(NumericsError::ZeroNorm);
                }
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
            (Tensor::new(ta.shape().to_vec(), out)?, norms)
        };
        self.push("normalize_rows", value, Op::NormalizeRows { a, norms }, &[a])
    }

    /// Pools each segment of row indices into one output row. Max pooling
    /// routes gradient to the first maximal row of each column.
    pub fn pool_rows(&self, a: Var, segments: &[Vec<usize>], kind: PoolKind) -> Result<Var> {
        let (value, argmax) = {
            let ta = self.value(a);
            let c = ta.cols();
            if segments.is_empty() {
                return Err(NumericsError::EmptyInput { op: "pool_rows" });
            }
            let mut out = vec![0.0; segments.len() * c];
            let mut argmax = Vec::new();
            for (s, seg) in segments.iter().enumerate() {
                if seg.is_empty() {
                    return Err(NumericsError::AllMasked);
                }
                if let Some(&bad) = seg.iter().find(|&&r| r >= ta.rows()) {
                    return Err(NumericsError::IndexOutOfRange { op: "pool_rows", index: bad, bound: ta.rows() });
                }
                let orow = &mut out[s * c..(s + 1) * c];
                match kind {
                    PoolKind::Max => {
                        for j in 0..c {
                            let mut best = seg[0];
                            for &r in &seg[1..] {
                                if ta.row(r)[j] > ta.row(best)[j] {
                                    best = r;
                                }
                            }
                            orow[j] = ta.row(best)[j];
                            argmax.push(best);
                        }
                    }
                    PoolKind::Mean => {
                        for &r in seg {
                            for (o, x) in orow.iter_mut().zip(ta.row(r)) {
                                *o += x;
                            }
                        }
                        let inv = 1.0 / seg.len() as f64;
                        orow.iter_mut().for_each(|o| *o *= inv);
                    }
                }
            }
            (Tensor::new(vec![segments.len(), c], out)?, argmax)
        };
        let segments = segments.to_vec();
        self.push("pool_rows", value, Op::Pool { a, segments, kind, argmax }, &[a])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, Op::Sum { a }, &[a])
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let first = parts.first().ok_or(NumericsError::EmptyInput { op: "concat_rows" })?;
            let c = self.value(*first).cols();
            let mut rows = 0;
            let mut out = Vec::new();
            for p in parts {
                let t = self.value(*p);
                if t.cols() != c {
                    return Err(mismatch("concat_rows", &[rows, c], t.shape()));
                }
                rows += t.rows();
                out.extend_from_slice(t.data());
            }
            Tensor::new(vec![rows, c], out)?
        };
        self.push("concat_rows", value, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one call.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(NumericsError::TapeReused);
        }
        let nodes = self.nodes.borrow();
        if !nodes[loss.0].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss { shape: nodes[loss.0].value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(&nodes, node, &g, &mut grads);
        }
        let leaves = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, g) {
                (Op::Leaf, Some(g)) if n.needs_grad => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: leaves, shapes })
    }

    fn backprop_node(&self, nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: &Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(da) = slot(grads, nodes, *a) {
                    if self.options.corrupt_matmul_grad {
                        let mut tmp = vec![0.0; m * k];
                        gemm(m, n, k, g, false, tb.data(), true, &mut tmp, false);
                        da.iter_mut().zip(tmp).for_each(|(d, t)| *d += 1.5 * t);
                    } else {
                        gemm(m, n, k, g, false, tb.data(), true, da, true);
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    gemm(k, m, n, ta.data(), true, g, false, db, true);
                }
            }
            Op::MatMulNt { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(da) = slot(grads, nodes, *a) {
                    if self.options.corrupt_matmul_grad {
                        let mut tmp = vec![0.0; m * k];
                        gemm(m, n, k, g, false, tb.data(), false, &mut tmp, false);
                        da.iter_mut().zip(tmp).for_each(|(d, t)| *d += 1.5 * t);
                    } else {
                        gemm(m, n, k, g, false, tb.data(), false, da, true);
                    }
                }
                if let Some(db) = slot(grads, nodes, *b) {
                    gemm(n, m, k, g, true, ta.data(), false, db, true);
                }
            }
            Op::Add { a, b } => {
                for p in [a, b] {
                    if let Some(d) = slot(grads, nodes, *p) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    add_into(d, g);
                }
                if let Some(d) = slot(grads, nodes, *bias) {
                    let c = d.len();
                    for (i, x) in g.iter().enumerate() {
                        d[i % c] += x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if *factor != 0.0 {
                    if let Some(d) = slot(grads, nodes, *a) {
                        d.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x);
                    }
                }
            }
            Op::DivScalar { a, s } => {
                let (ta, sv) = (val(a), val(s).item());
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().zip(g).for_each(|(d, x)| *d += x / sv);
                }
                if let Some(d) = slot(grads, nodes, *s) {
                    let acc: f64 = g.iter().zip(ta.data()).map(|(x, y)| x * y).sum();
                    d[0] -= acc / (sv * sv);
                }
            }
            Op::Gelu { a } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    for ((d, x), gi) in d.iter_mut().zip(val(a).data()).zip(g) {
                        *d += gi * gelu_grad(*x);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = val(gamma);
                let c = tg.numel();
                if let Some(d) = slot(grads, nodes, *gamma) {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % c] += gi * xhat[i];
                    }
                }
                if let Some(d) = slot(grads, nodes, *beta) {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % c] += gi;
                    }
                }
                if let Some(d) = slot(grads, nodes, *x) {
                    let mut dxhat = vec![0.0; c];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = gr[j] * tg.data()[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[r * c + j] += is * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                if let Some(d) = slot(grads, nodes, *table) {
                    let c = val(table).cols();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let c = val(a).cols();
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    add_into(d, g);
                }
            }
            Op::Softmax { a } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    for ((d, gi), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += gi * m;
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs, keep } => {
                self.backprop_attention(nodes, grads, g, (*q, *k, *v), layout, probs, keep.as_deref());
            }
            Op::CrossEntropy { logits, targets, scale, probs } => {
                if let Some(d) = slot(grads, nodes, *logits) {
                    let c = val(logits).cols();
                    let coef = g[0] * scale;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * c + j] += coef * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::NormalizeRows { a, norms } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    for (r, n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += (gr[j] - yr[j] * s) / n;
                        }
                    }
                }
            }
            Op::Pool { a, segments, kind, argmax } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    let c = val(a).cols();
                    for (s, seg) in segments.iter().enumerate() {
                        let gs = &g[s * c..(s + 1) * c];
                        match kind {
                            PoolKind::Max => {
                                for j in 0..c {
                                    d[argmax[s * c + j] * c + j] += gs[j];
                                }
                            }
                            PoolKind::Mean => {
                                let inv = 1.0 / seg.len() as f64;
                                for &r in seg {
                                    for j in 0..c {
                                        d[r * c + j] += gs[j] * inv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(d) = slot(grads, nodes, *a) {
                    d.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = val(p).numel();
                    if let Some(d) = slot(grads, nodes, *p) {
                        add_into(d, &g[off..off + n]);
                    }
                    off += n;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        l: &AttentionLayout,
        probs: &[f64],
        keep: Option<&[f64]>,
    ) {
        let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = tq.cols();
        let dh = d / l.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq.numel()];
        let mut dk = vec![0.0; tk.numel()];
        let mut dv = vec![0.0; tv.numel()];
        let mut dp = vec![0.0; l.k_len];
        for b in 0..l.batch {
            for h in 0..l.heads {
                let off = h * dh;
                for i in 0..l.q_len {
                    let qrow = b * l.q_len + i;
                    let gi = &g[qrow * d + off..qrow * d + off + dh];
                    let base = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                    let mut weighted = 0.0;
                    for j in 0..l.k_len {
                        if !l.allowed(b, i, j) {
                            continue;
                        }
                        let krow = b * l.k_len + j;
                        let m = keep.map_or(1.0, |km| km[base + j]);
                        let p = probs[base + j];
                        let vj = &tv.row(krow)[off..off + dh];
                        dp[j] = dot(gi, vj) * m;
                        weighted += p * dp[j];
                        let w = p * m;
                        for (x, gv) in dv[krow * d + off..krow * d + off + dh].iter_mut().zip(gi) {
                            *x += w * gv;
                        }
                    }
                    let qi = &tq.row(qrow)[off..off + dh];
                    for j in 0..l.k_len {
                        if !l.allowed(b, i, j) {
                            continue;
                        }
                        let krow = b * l.k_len + j;
                        let ds = probs[base + j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &tk.row(krow)[off..off + dh];
                        for (x, kv) in dq[qrow * d + off..qrow * d + off + dh].iter_mut().zip(kj) {
                            *x += ds * kv;
                        }
                        for (x, qv) in dk[krow * d + off..krow * d + off + dh].iter_mut().zip(qi) {
                            *x += ds * qv;
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = slot(grads, nodes, var) {
                add_into(slot, &buf);
            }
        }
    }
}

/// Leaf gradients returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

pub(crate) const ZERO_NORM: f64 = 1e-12;

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail: format!("{a:?} vs {b:?}") }
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(x) = s.last_mut() {
        *x = last;
    } else {
        s.push(last);
    }
    s
}

fn keep_mask(n: usize, p: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044_715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + sorted_sum(row.iter().map(|x| (x - max).exp()).collect()).ln()
}

/// Sums in ascending order so the result does not depend on input order.
pub(crate) fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}
