//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! A [`Graph`] is append-only: every op pushes a node whose inputs are earlier
//! nodes, so the node order is already a topological order. [`Graph::backward`]
//! walks it in reverse and accumulates gradients additively across fan-out.
//! Gradients are retained only for leaves.
//!
//! Every node's value is checked for NaN/Inf when it is produced.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, View, ViewMut};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<F>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        inv: Vec<F>,
    },
    Rope {
        x: Var,
        heads: usize,
        offset: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Cosine {
        a: Var,
        b: Var,
        eps: F,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation. Single writer; values are immutable once pushed.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    record: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Post-softmax attention weights saved by an attention node, laid out `[head][query][key]`.
pub struct AttentionProbs<'a, F> {
    pub probs: &'a [F],
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
}

fn dims2<F: Real>(t: &Tensor<F>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<F: Real> Graph<F> {
    /// Graph that records gradients for leaves created with `requires_grad`.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Graph that never requires gradients (inference only).
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`; their `Var`s become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.record && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &str, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.matmul(tb)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    /// Broadcast-add a `[c]` row to every row of an `[n, c]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.cols();
        if tb.numel() != c {
            return Err(Error::Dimension(format!(
                "add_row: bias of {} elements for width {c}",
                tb.numel()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        self.push("add_row", out, Op::AddRow(x, bias), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let tx = self.value(x);
        let out = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * s).collect())?;
        let rg = self.rg(&[x]);
        self.push("scale", out, Op::Scale(x, s), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -F::one())?;
        self.add(a, nb)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let s: F = t.data().iter().copied().sum();
        let m = s / F::lit(t.numel() as f64);
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("silu", out, Op::Silu(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("gelu", out, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN input".into()));
        }
        let (_, c) = dims2(tx);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("softmax_rows", out, Op::Softmax(x), rg)
    }

    /// Root-mean-square normalization over the last axis: `x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (n, c) = dims2(tx);
        if c == 0 || tx.shape().is_empty() {
            return Err(Error::Dimension("rms_norm over a zero-length feature axis".into()));
        }
        if tg.numel() != c {
            return Err(Error::Dimension(format!("rms_norm: gain {} vs width {c}", tg.numel())));
        }
        let mut data = vec![F::zero(); n * c];
        let mut inv = Vec::with_capacity(n);
        for i in 0..n {
            let row = tx.row(i);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::lit(c as f64);
            let r = F::one() / (ms + eps).sqrt();
            inv.push(r);
            for j in 0..c {
                data[i * c + j] = row[j] * r * tg.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain]);
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv }, rg)
    }

    /// Layer normalization without bias: `(x - mean) / sqrt(var + eps) * gain`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (n, c) = dims2(tx);
        if c == 0 || tx.shape().is_empty() {
            return Err(Error::Dimension("layer_norm over a zero-length feature axis".into()));
        }
        if tg.numel() != c {
            return Err(Error::Dimension(format!("layer_norm: gain {} vs width {c}", tg.numel())));
        }
        let cf = F::lit(c as f64);
        let mut data = vec![F::zero(); n * c];
        let mut inv = Vec::with_capacity(n);
        for i in 0..n {
            let row = tx.row(i);
            let mu = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / cf;
            let r = F::one() / (var + eps).sqrt();
            inv.push(r);
            for j in 0..c {
                data[i * c + j] = (row[j] - mu) * r * tg.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, gain]);
        self.push("layer_norm", out, Op::LayerNorm { x, gain, inv }, rg)
    }

    /// Rotary position encoding (rotate-half layout) applied per head; row `i` sits at
    /// absolute position `offset + i`.
    pub fn rope(&mut self, x: Var, heads: usize, offset: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = dims2(tx);
        if heads == 0 || c % heads != 0 || (c / heads) % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rope: width {c} not splittable into {heads} even heads"
            )));
        }
        let mut data = tx.data().to_vec();
        rope_apply(&mut data, n, c, heads, offset, base, false);
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(
            "rope",
            out,
            Op::Rope {
                x,
                heads,
                offset,
                base,
            },
            rg,
        )
    }

    /// Causal multi-head attention. Query row `i` sits at absolute position `offset + i`
    /// and may attend keys `0..=offset + i`. Keys and values are `[nk, c]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, offset: usize) -> Result<Var> {
        self.attention(q, k, v, heads, Some(offset))
    }

    /// Bidirectional multi-head attention: every query sees every key.
    pub fn full_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.attention(q, k, v, heads, None)
    }

    fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal_offset: Option<usize>) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, c) = dims2(tq);
        let (nk, ck) = dims2(tk);
        if ck != c || tv.shape() != tk.shape() || tq.shape().len() != 2 || tk.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "attention q {:?} k {:?} v {:?}",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Dimension(format!("attention: width {c} vs {heads} heads")));
        }
        if nk == 0 {
            return Err(Error::Dimension("attention over zero keys".into()));
        }
        if let Some(offset) = causal_offset {
            if nk < offset + nq {
                return Err(Error::Dimension(format!(
                    "attention: {nk} keys cannot cover queries at positions {offset}..{}",
                    offset + nq
                )));
            }
        }
        let (out, probs) = attention_forward(tq.data(), tk.data(), tv.data(), nq, nk, c, heads, causal_offset);
        let out = Tensor::new(vec![nq, c], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push("attention", out, Op::Attention { q, k, v, heads, probs }, rg)
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_, F>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } => Some(AttentionProbs {
                probs,
                heads: *heads,
                queries: self.value(*q).rows(),
                keys: self.value(*k).rows(),
            }),
            _ => None,
        }
    }

    /// Select rows of a matrix (embedding lookup, slicing, permutation).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = dims2(tx);
        if tx.shape().len() != 2 {
            return Err(Error::Dimension(format!("gather_rows on shape {:?}", tx.shape())));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= n {
                return Err(Error::Dimension(format!("gather_rows: row {r} of {n}")));
            }
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[x]);
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat_rows of nothing".into()));
        };
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 2 || t.cols() != c {
                return Err(Error::Dimension(format!("concat_rows: part {:?} vs width {c}", t.shape())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", out, Op::Reshape(x), rg)
    }

    /// Row-wise cosine similarity `a.b / max(|a||b|, eps)`, output shape `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: F) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, _) = dims2(ta);
        let out: Vec<F> = (0..n)
            .map(|i| {
                let (dot, na, nb) = row_stats(ta.row(i), tb.row(i));
                dot / cos_denom(na, nb, eps)
            })
            .collect();
        let out = Tensor::new(vec![n], out)?;
        let rg = self.rg(&[a, b]);
        self.push("cosine_rows", out, Op::Cosine { a, b, eps }, rg)
    }

    /// Mean negative log-likelihood of `targets[i]` under row `i` of `logits`, over the
    /// rows where `mask[i]` holds.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = dims2(tl);
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::DegenerateBatch);
        }
        let mut tgt = Vec::with_capacity(rows.len());
        let mut probs = Vec::with_capacity(rows.len() * v);
        let mut total = F::zero();
        for &i in &rows {
            let t = targets[i];
            if t >= v {
                return Err(Error::Dimension(format!("cross_entropy: target {t} outside vocab {v}")));
            }
            let row = tl.row(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let se: F = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + se.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            tgt.push(t);
        }
        let loss = total / F::lit(rows.len() as f64);
        let rg = self.rg(&[logits]);
        if !rg {
            probs = Vec::new();
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                rows,
                targets: tgt,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            match (g, &node.op) {
                (Some(g), Op::Leaf) => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::Numeric("non-finite gradient".into()));
                    }
                    out.push(Some(Tensor::new(node.value.shape().to_vec(), g)?));
                }
                _ => out.push(None),
            }
        }
        Ok(Gradients { grads: out })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); node.value.numel()]))
    }

    fn backprop(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(
                        F::one(),
                        View::dense(g, m, n),
                        View::dense(tb.data(), k, n).t(),
                        F::one(),
                        ViewMut::dense(da, m, k),
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(
                        F::one(),
                        View::dense(ta.data(), m, k).t(),
                        View::dense(g, m, n),
                        F::one(),
                        ViewMut::dense(db, k, n),
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        axpy(d, F::one(), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, F::one(), g);
                }
                let c = out.cols().max(1);
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(c) {
                        axpy(db, F::one(), row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(tb) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(ta) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, *s, g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let s = g[0] / F::lit(dx.len() as f64);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Silu(x) => {
                let tx = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(tx) {
                        let s = sigmoid(xi);
                        *d += gi * s * (F::one() + xi * (F::one() - s));
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(tx) {
                        *d += gi * gelu_grad(xi);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols().max(1);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let (tx, tg) = (self.value(*x), self.value(*gain).data());
                let c = tx.cols();
                let cf = F::lit(c as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &r) in inv.iter().enumerate() {
                        let xr = tx.row(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let mut proj = F::zero();
                        for j in 0..c {
                            proj += gr[j] * tg[j] * xr[j] * r;
                        }
                        proj /= cf;
                        for j in 0..c {
                            dx[i * c + j] += r * (gr[j] * tg[j] - xr[j] * r * proj);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (i, &r) in inv.iter().enumerate() {
                        let xr = tx.row(i);
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xr[j] * r;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, inv } => {
                let (tx, tg) = (self.value(*x), self.value(*gain).data());
                let c = tx.cols();
                let cf = F::lit(c as f64);
                let normed = |i: usize| -> Vec<F> {
                    let xr = tx.row(i);
                    let mu = xr.iter().copied().sum::<F>() / cf;
                    xr.iter().map(|&v| (v - mu) * inv[i]).collect()
                };
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &r) in inv.iter().enumerate() {
                        let u = normed(i);
                        let gr = &g[i * c..(i + 1) * c];
                        let mut mean_gg = F::zero();
                        let mut mean_ggu = F::zero();
                        for j in 0..c {
                            let gg = gr[j] * tg[j];
                            mean_gg += gg;
                            mean_ggu += gg * u[j];
                        }
                        mean_gg /= cf;
                        mean_ggu /= cf;
                        for j in 0..c {
                            dx[i * c + j] += r * (gr[j] * tg[j] - mean_gg - u[j] * mean_ggu);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for i in 0..inv.len() {
                        let u = normed(i);
                        for j in 0..c {
                            dg[j] += g[i * c + j] * u[j];
                        }
                    }
                }
            }
            Op::Rope {
                x,
                heads,
                offset,
                base,
            } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (n, c) = dims2(out);
                    let mut back = g.to_vec();
                    rope_apply(&mut back, n, c, *heads, *offset, *base, true);
                    axpy(dx, F::one(), &back);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, c) = dims2(tq);
                let nk = tk.rows();
                let (dq, dk, dv) = attention_backward(tq.data(), tk.data(), tv.data(), probs, g, nq, nk, c, *heads);
                if let Some(d) = self.slot(grads, *q) {
                    axpy(d, F::one(), &dq);
                }
                if let Some(d) = self.slot(grads, *k) {
                    axpy(d, F::one(), &dk);
                }
                if let Some(d) = self.slot(grads, *v) {
                    axpy(d, F::one(), &dv);
                }
            }
            Op::Gather { x, idx } => {
                let c = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut dx[src * c..(src + 1) * c], F::one(), &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        axpy(dp, F::one(), &g[start..start + len]);
                    }
                    start += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    axpy(dx, F::one(), g);
                }
            }
            Op::Cosine { a, b, eps } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                let n = ta.rows();
                let mut da = vec![F::zero(); n * c];
                let mut db = vec![F::zero(); n * c];
                for i in 0..n {
                    let (ar, br) = (ta.row(i), tb.row(i));
                    let (dot, na, nb) = row_stats(ar, br);
                    let denom = cos_denom(na, nb, *eps);
                    let clamped = (na * nb).sqrt() < *eps;
                    let cos = dot / denom;
                    for j in 0..c {
                        let (ga, gb) = if clamped {
                            (br[j] / denom, ar[j] / denom)
                        } else {
                            (br[j] / denom - cos * ar[j] / na, ar[j] / denom - cos * br[j] / nb)
                        };
                        da[i * c + j] = g[i] * ga;
                        db[i * c + j] = g[i] * gb;
                    }
                }
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d, F::one(), &da);
                }
                if let Some(d) = self.slot(grads, *b) {
                    axpy(d, F::one(), &db);
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / F::lit(rows.len() as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (e, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        let p = &probs[e * v..(e + 1) * v];
                        let d = &mut dl[r * v..(r + 1) * v];
                        for j in 0..v {
                            d[j] += scale * p[j];
                        }
                        d[t] -= scale;
                    }
                }
            }
        }
    }
}

fn axpy<F: Real>(dst: &mut [F], a: F, src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<F: Real>(x: F) -> F {
    let u = F::lit(GELU_K) * (x + F::lit(GELU_C) * x * x * x);
    F::lit(0.5) * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let u = F::lit(GELU_K) * (x + F::lit(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = F::lit(GELU_K) * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * du
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn row_stats<F: Real>(a: &[F], b: &[F]) -> (F, F, F) {
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

fn cos_denom<F: Real>(na: F, nb: F, eps: F) -> F {
    (na * nb).sqrt().max(eps)
}

/// Rotates each head's `(i, i + d/2)` pairs by `pos * base^(-2i/d)`; `inverse` rotates back.
pub(crate) fn rope_apply<F: Real>(
    data: &mut [F],
    n: usize,
    c: usize,
    heads: usize,
    offset: usize,
    base: f64,
    inverse: bool,
) {
    let dh = c / heads;
    let half = dh / 2;
    let inv_freq: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
    for r in 0..n {
        let pos = (offset + r) as f64;
        let trig: Vec<(F, F)> = inv_freq
            .iter()
            .map(|&f| {
                let (s, co) = (pos * f).sin_cos();
                (F::lit(if inverse { -s } else { s }), F::lit(co))
            })
            .collect();
        let row = &mut data[r * c..(r + 1) * c];
        for h in 0..heads {
            let base_idx = h * dh;
            for (i, &(s, co)) in trig.iter().enumerate() {
                let x1 = row[base_idx + i];
                let x2 = row[base_idx + i + half];
                row[base_idx + i] = x1 * co - x2 * s;
                row[base_idx + i + half] = x1 * s + x2 * co;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
    causal_offset: Option<usize>,
) -> (Vec<F>, Vec<F>) {
    let dh = c / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut out = vec![F::zero(); nq * c];
    let mut probs = vec![F::zero(); heads * nq * nk];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        gemm(
            scale,
            View {
                data: q,
                offset: h * dh,
                rows: nq,
                cols: dh,
                rs: c,
                cs: 1,
            },
            View {
                data: k,
                offset: h * dh,
                rows: nk,
                cols: dh,
                rs: c,
                cs: 1,
            }
            .t(),
            F::zero(),
            ViewMut::dense(p, nq, nk),
        );
        for i in 0..nq {
            let allowed = causal_offset.map_or(nk, |o| (o + i + 1).min(nk));
            let row = &mut p[i * nk..(i + 1) * nk];
            softmax_in_place(&mut row[..allowed]);
            row[allowed..].iter_mut().for_each(|x| *x = F::zero());
        }
        gemm(
            F::one(),
            View::dense(p, nq, nk),
            View {
                data: v,
                offset: h * dh,
                rows: nk,
                cols: dh,
                rs: c,
                cs: 1,
            },
            F::zero(),
            ViewMut {
                data: &mut out,
                offset: h * dh,
                rows: nq,
                cols: dh,
                rs: c,
                cs: 1,
            },
        );
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: &[F],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let dh = c / heads;
    let scale = F::one() / F::lit(dh as f64).sqrt();
    let mut dq = vec![F::zero(); nq * c];
    let mut dk = vec![F::zero(); nk * c];
    let mut dv = vec![F::zero(); nk * c];
    let mut ds = vec![F::zero(); nq * nk];
    fn head<F>(data: &[F], rows: usize, h: usize, dh: usize, c: usize) -> View<'_, F> {
        View {
            data,
            offset: h * dh,
            rows,
            cols: dh,
            rs: c,
            cs: 1,
        }
    }
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dV += P^T dO
        gemm(
            F::one(),
            View::dense(p, nq, nk).t(),
            head(g, nq, h, dh, c),
            F::one(),
            ViewMut {
                data: &mut dv,
                offset: h * dh,
                rows: nk,
                cols: dh,
                rs: c,
                cs: 1,
            },
        );
        // dP = dO V^T
        gemm(
            F::one(),
            head(g, nq, h, dh, c),
            head(v, nk, h, dh, c).t(),
            F::zero(),
            ViewMut::dense(&mut ds, nq, nk),
        );
        for i in 0..nq {
            let pr = &p[i * nk..(i + 1) * nk];
            let dr = &mut ds[i * nk..(i + 1) * nk];
            let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pi) in dr.iter_mut().zip(pr) {
                *d = pi * (*d - dot);
            }
        }
        gemm(
            scale,
            View::dense(&ds, nq, nk),
            head(k, nk, h, dh, c),
            F::one(),
            ViewMut {
                data: &mut dq,
                offset: h * dh,
                rows: nq,
                cols: dh,
                rs: c,
                cs: 1,
            },
        );
        gemm(
            scale,
            View::dense(&ds, nq, nk).t(),
            head(q, nq, h, dh, c),
            F::one(),
            ViewMut {
                data: &mut dk,
                offset: h * dh,
                rows: nk,
                cols: dh,
                rs: c,
                cs: 1,
            },
        );
    }
    (dq, dk, dv)
}
