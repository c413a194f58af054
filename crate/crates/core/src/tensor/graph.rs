use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::scalar::Scalar;

use super::ops::{self, AttentionSpec, LayerNormCache};
use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which store parameters get gradients when bound into a graph.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    Nothing,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<S: AsRef<str>>(p: &[S]) -> Self {
        Trainable::Prefixes(p.iter().map(|s| s.as_ref().to_string()).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|pre| name.starts_with(pre.as_str())),
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Dropout(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<T>,
    },
    MeanPool {
        x: Var,
        valid: Vec<bool>,
        batch: usize,
        counts: Vec<usize>,
    },
    GatherRows(Var, Vec<usize>),
    AssembleRows(Vec<(Var, Vec<usize>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Every operation appends a node holding its forward value; [`Graph::backward`]
/// walks the tape in reverse and accumulates gradients into every node that
/// transitively depends on a gradient-requiring leaf.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    bound: HashMap<String, Var>,
    trainable: Trainable,
    checked: bool,
    fault: Option<String>,
    ln_eps: T,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new(Trainable::All)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new(trainable: Trainable) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            trainable,
            checked: false,
            fault: None,
            ln_eps: T::from_f64_lossy(1e-5),
        }
    }

    /// Graph that never records gradients; used for decoding and evaluation.
    pub fn inference() -> Self {
        Self::new(Trainable::Nothing)
    }

    /// Record the first non-finite forward value so [`Graph::check`] can report it.
    pub fn with_checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Var {
        if self.checked && self.fault.is_none() && !value.is_finite() {
            self.fault = Some(name.to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Error if checked mode saw a NaN or infinity in any forward value.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            Some(op) => Err(Error::NonFinite(format!("forward value of {op}"))),
            None => Ok(()),
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a named store parameter; repeated binds return the same node.
    pub fn bind(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let rg = self.trainable.contains(name);
        let v = self.leaf(t, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every bound parameter that was trainable, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.rg(v) {
                continue;
            }
            let g = self.grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg, "matmul"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg, "add"))
    }

    /// `x + bias` with `bias` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.as_matrix_dims();
        if tb.numel() != cols {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg, "add_bias"))
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (_, cols) = t.as_matrix_dims();
        let data = ops::softmax_rows(t.data(), cols);
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg, "softmax")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg, "sum")
    }

    /// Inverted dropout; a no-op when `p == 0` or no rng is given (eval mode).
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut RngStream>) -> Var {
        let Some(rng) = rng else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.numel())
            .map(|_| if rng.uniform() < p { T::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout(x, mask), rg, "dropout")
    }

    /// Layer normalization over the last axis, population variance, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, cols) = tx.as_matrix_dims();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let (y, cache) = ops::layer_norm_forward(tx.data(), cols, tg.data(), tb.data(), self.ln_eps);
        let out = Tensor::new(tx.shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
            "layer_norm",
        ))
    }

    /// Mean token-level negative log-likelihood of `targets` under row-wise
    /// softmax of `logits`; rows whose target equals `ignore` are excluded.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, vocab) = t.as_matrix_dims();
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = ops::softmax_rows(t.data(), vocab);
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore {
                probs[r * vocab..(r + 1) * vocab]
                    .iter_mut()
                    .for_each(|p| *p = T::zero());
                continue;
            }
            if tgt >= vocab {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: tgt,
                    size: vocab,
                });
            }
            let row = t.row(r);
            total = total + ops::log_sum_exp(row) - row[tgt];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(count)
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
            "cross_entropy",
        ))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, dim) = t.as_matrix_dims();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
            "embedding",
        ))
    }

    /// Batched multi-head scaled dot-product attention over projected inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (qrows, dim) = tq.as_matrix_dims();
        let (krows, kdim) = tk.as_matrix_dims();
        if kdim != dim || tv.shape() != tk.shape() {
            return Err(Error::shape("attention", tq.shape(), tk.shape()));
        }
        if qrows != spec.batch * spec.q_len
            || krows != spec.batch * spec.k_len
            || spec.key_valid.len() != krows
        {
            return Err(Error::shape(
                "attention",
                tq.shape(),
                &[spec.batch, spec.q_len, spec.k_len],
            ));
        }
        if spec.heads == 0 || dim % spec.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "dim {dim} not divisible by {} heads",
                spec.heads
            )));
        }
        let (out, probs) = ops::attention_forward(tq.data(), tk.data(), tv.data(), dim, &spec);
        let out = Tensor::new(vec![qrows, dim], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            rg,
            "attention",
        ))
    }

    /// Mean over the valid positions of each of `batch` equal-length segments.
    pub fn masked_mean_pool(&mut self, x: Var, valid: &[bool], batch: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, dim) = t.as_matrix_dims();
        if batch == 0 || rows % batch != 0 || valid.len() != rows {
            return Err(Error::shape("masked_mean_pool", t.shape(), &[batch, valid.len()]));
        }
        let seq = rows / batch;
        let mut out = vec![T::zero(); batch * dim];
        let mut counts = vec![0usize; batch];
        for b in 0..batch {
            for i in 0..seq {
                let r = b * seq + i;
                if !valid[r] {
                    continue;
                }
                counts[b] += 1;
                for (o, &v) in out[b * dim..(b + 1) * dim].iter_mut().zip(t.row(r)) {
                    *o = *o + v;
                }
            }
            if counts[b] == 0 {
                return Err(Error::InvalidArgument(format!(
                    "sequence {b} has no non-pad positions to pool"
                )));
            }
            let n = T::from_usize_lossy(counts[b]);
            out[b * dim..(b + 1) * dim].iter_mut().for_each(|o| *o = *o / n);
        }
        let out = Tensor::new(vec![batch, dim], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MeanPool {
                x,
                valid: valid.to_vec(),
                batch,
                counts,
            },
            rg,
            "masked_mean_pool",
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, dim) = t.as_matrix_dims();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    what: "gather row",
                    index: r,
                    size: n,
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), dim], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec()), rg, "gather_rows"))
    }

    /// Inverse of a partition into [`Graph::gather_rows`] calls: row `idx[i]`
    /// of the output is row `i` of the matching part. Every output row must be
    /// covered exactly once.
    pub fn assemble_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, n_rows: usize) -> Result<Var> {
        let dim = match parts.first() {
            Some((v, _)) => self.value(*v).as_matrix_dims().1,
            None => return Err(Error::InvalidArgument("assemble_rows: no parts".into())),
        };
        let mut data = vec![T::zero(); n_rows * dim];
        let mut seen = vec![false; n_rows];
        for (v, idx) in &parts {
            let t = self.value(*v);
            if t.as_matrix_dims() != (idx.len(), dim) {
                return Err(Error::shape("assemble_rows", t.shape(), &[idx.len(), dim]));
            }
            for (i, &r) in idx.iter().enumerate() {
                if r >= n_rows || seen[r] {
                    return Err(Error::InvalidArgument(format!(
                        "assemble_rows: row {r} out of range or covered twice"
                    )));
                }
                seen[r] = true;
                data[r * dim..(r + 1) * dim].copy_from_slice(t.row(i));
            }
        }
        if let Some(r) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("assemble_rows: row {r} not covered")));
        }
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        let out = Tensor::new(vec![n_rows, dim], data)?;
        Ok(self.push(out, Op::AssembleRows(parts), rg, "assemble_rows"))
    }

    /// Back-propagate from a scalar `loss`; seeds its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", self.value(loss).shape(), &[1]));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            let target = &nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); target.value.numel()]);
            f(buf);
        };
        let add_into = |buf: &mut [T], src: &[T]| {
            for (b, &s) in buf.iter_mut().zip(src) {
                *b = *b + s;
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC B^T, dB = A^T dC
                acc(*a, &mut |buf| ops::gemm(m, n, k, g, false, tb.data(), true, buf, true));
                acc(*b, &mut |buf| ops::gemm(k, m, n, ta.data(), true, g, false, buf, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |buf| add_into(buf, g));
                let cols = nodes[bias.0].value.numel();
                acc(*bias, &mut |buf| {
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |buf| {
                for (b, &d) in buf.iter_mut().zip(g) {
                    *b = *b + d * *s;
                }
            }),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |buf| {
                    for ((b, &d), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *b = *b + d;
                        }
                    }
                })
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for ((b, &d), &t) in buf.iter_mut().zip(g).zip(y) {
                        *b = *b + d * (T::one() - t * t);
                    }
                })
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let (_, cols) = node.value.as_matrix_dims();
                acc(*x, &mut |buf| {
                    for ((brow, grow), yrow) in
                        buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let inner = ops::dot(grow, yrow);
                        for c in 0..cols {
                            brow[c] = brow[c] + yrow[c] * (grow[c] - inner);
                        }
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|b| *b = *b + g[0])),
            Op::Dropout(x, mask) => acc(*x, &mut |buf| {
                for ((b, &d), &m) in buf.iter_mut().zip(g).zip(mask) {
                    *b = *b + d * m;
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let gv = nodes[gain.0].value.data();
                let cols = gv.len();
                let (dx, dg, db) = ops::layer_norm_backward(g, cols, gv, cache);
                acc(*x, &mut |buf| add_into(buf, &dx));
                acc(*gain, &mut |buf| add_into(buf, &dg));
                acc(*bias, &mut |buf| add_into(buf, &db));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = nodes[logits.0].value.as_matrix_dims().1;
                let scale = g[0] / T::from_usize_lossy(*count);
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        if Some(t) == *ignore {
                            continue;
                        }
                        let off = r * vocab;
                        for c in 0..vocab {
                            buf[off + c] = buf[off + c] + scale * probs[off + c];
                        }
                        buf[off + t] = buf[off + t] - scale;
                    }
                })
            }
            Op::Embedding { table, ids } => {
                let dim = node.value.as_matrix_dims().1;
                acc(*table, &mut |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                })
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let dim = node.value.as_matrix_dims().1;
                let (dq, dk, dv) = ops::attention_backward(
                    g,
                    nodes[q.0].value.data(),
                    nodes[k.0].value.data(),
                    nodes[v.0].value.data(),
                    probs,
                    dim,
                    spec,
                );
                acc(*q, &mut |buf| add_into(buf, &dq));
                acc(*k, &mut |buf| add_into(buf, &dk));
                acc(*v, &mut |buf| add_into(buf, &dv));
            }
            Op::MeanPool {
                x,
                valid,
                batch,
                counts,
            } => {
                let dim = node.value.as_matrix_dims().1;
                let seq = valid.len() / batch;
                acc(*x, &mut |buf| {
                    for b in 0..*batch {
                        let inv = T::one() / T::from_usize_lossy(counts[b]);
                        for i in 0..seq {
                            let r = b * seq + i;
                            if !valid[r] {
                                continue;
                            }
                            for c in 0..dim {
                                buf[r * dim + c] = buf[r * dim + c] + g[b * dim + c] * inv;
                            }
                        }
                    }
                })
            }
            Op::GatherRows(x, rows) => {
                let dim = node.value.as_matrix_dims().1;
                acc(*x, &mut |buf| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut buf[r * dim..(r + 1) * dim], &g[i * dim..(i + 1) * dim]);
                    }
                })
            }
            Op::AssembleRows(parts) => {
                let dim = node.value.as_matrix_dims().1;
                for (v, idx) in parts {
                    acc(*v, &mut |buf| {
                        for (i, &r) in idx.iter().enumerate() {
                            add_into(&mut buf[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        }
                    });
                }
            }
        }
    }
}
