//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Graph`]; node order is a
//! topological order, so `backward` is a single reverse sweep.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{axis_split, gemm, softmax_lanes, Layout, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking of one fused multi-head attention call.
///
/// Queries are laid out as `batch * q_len` rows and keys/values as
/// `batch * k_len` rows, each of width `d_model`; head `h` owns columns
/// `h * d_k .. (h + 1) * d_k`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per `(batch, key)` validity; invalid keys are masked with `-inf`.
    pub key_valid: Option<Vec<bool>>,
    /// Additive `q_len x k_len` mask shared by every batch entry and head.
    pub additive_mask: Option<Tensor>,
    pub dropout: f64,
}

impl AttentionSpec {
    pub fn new(batch: usize, q_len: usize, k_len: usize, heads: usize) -> Self {
        Self {
            batch,
            q_len,
            k_len,
            heads,
            causal: false,
            key_valid: None,
            additive_mask: None,
            dropout: 0.0,
        }
    }

    /// Additive mask term for score `(b, i, j)`: `0` or `-inf`.
    pub fn mask_term(&self, b: usize, i: usize, j: usize) -> f64 {
        if self.causal && j > i {
            return f64::NEG_INFINITY;
        }
        if let Some(valid) = &self.key_valid {
            if !valid[b * self.k_len + j] {
                return f64::NEG_INFINITY;
            }
        }
        match &self.additive_mask {
            Some(m) => m.data()[i * self.k_len + j],
            None => 0.0,
        }
    }

    pub fn is_masked(&self, b: usize, i: usize, j: usize) -> bool {
        self.mask_term(b, i, j) == f64::NEG_INFINITY
    }
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    spec: AttentionSpec,
    /// Softmax weights before dropout, `[batch][head][q][k]`.
    weights: Vec<f64>,
    /// Dropout multipliers over `weights`, when dropout was active.
    keep: Option<Vec<f64>>,
}

/// Read-only view of the weights of one recorded attention call.
pub struct AttentionMap<'a> {
    pub spec: &'a AttentionSpec,
    pub weights: &'a [f64],
}

impl AttentionMap<'_> {
    pub fn weight(&self, b: usize, h: usize, i: usize, j: usize) -> f64 {
        let s = self.spec;
        self.weights[((b * s.heads + h) * s.q_len + i) * s.k_len + j]
    }

    pub fn row(&self, b: usize, h: usize, i: usize) -> &[f64] {
        let s = self.spec;
        let start = ((b * s.heads + h) * s.q_len + i) * s.k_len;
        &self.weights[start..start + s.k_len]
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Attention(Box<AttentionRecord>),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        pad: u32,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation graph: recorded nodes plus, after [`Graph::backward`],
/// their gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(format!("add: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a vector to every row (broadcast over the trailing dimension).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let n = x.last_dim();
        if r.numel() != n || r.shape().len() != 1 {
            return shape_err(format!("row broadcast: {:?} + {:?}", x.shape(), r.shape()));
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % n])
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return shape_err(format!("mul: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `max(0, x)`; the gradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (outer, len, inner) = axis_split(x.shape(), axis)?;
        let out = x.softmax(axis)?;
        let rg = self.needs(&[a]);
        Ok(self.push(
            out,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalises the trailing dimension to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "layer norm epsilon must be positive, got {epsilon}"
            )));
        }
        let x = self.value(a);
        let n = x.last_dim();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.numel() != n || b.numel() != n {
            return shape_err(format!(
                "layer norm over width {n} with gain {:?} and bias {:?}",
                g.shape(),
                b.shape()
            ));
        }
        let rows = x.rows();
        let mut normed = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                normed[r * n + j] = h;
                out[r * n + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.needs(&[a, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors scaled by `1 / (1 - rate)`;
    /// otherwise the identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        check_dropout_rate(rate, training)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let keep: Vec<f64> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data = x.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Dropout { x: a, keep }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Gathers rows of `table` (`vocab x width`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, width) = t.dims2()?;
        if ids.is_empty() {
            return shape_err("embedding lookup of an empty id list");
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Vocabulary(format!(
                    "token id {id} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), width], data)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).dims2()?.0,
            None => return shape_err("concatenation of zero tensors"),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return shape_err(format!("concat: row counts {rows} and {r} differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.needs(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if start >= end || end > cols {
            return shape_err(format!("column slice {start}..{end} of width {cols}"));
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::SliceCols { x: a, start }, rg))
    }

    /// Fused multi-head scaled dot-product attention over already projected
    /// queries, keys and values: per batch entry and head,
    /// `softmax(Q K^T / sqrt(d_k) + mask) V`, heads concatenated.
    pub fn attention<R: Rng + ?Sized>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        check_dropout_rate(spec.dropout, training)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (q_rows, d) = qv.dims2()?;
        let (k_rows, dk_total) = kv.dims2()?;
        let (v_rows, dv_total) = vv.dims2()?;
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        if d != dk_total {
            return shape_err(format!("query width {d} differs from key width {dk_total}"));
        }
        if q_rows != batch * q_len || k_rows != batch * k_len || v_rows != k_rows {
            return shape_err(format!(
                "attention rows q={q_rows} k={k_rows} v={v_rows} for batch {batch}, q_len {q_len}, k_len {k_len}"
            ));
        }
        if heads == 0 || d % heads != 0 || dv_total % heads != 0 {
            return shape_err(format!("width {d} not divisible into {heads} heads"));
        }
        if let Some(m) = &spec.additive_mask {
            if m.shape() != [q_len, k_len] {
                return shape_err(format!(
                    "mask {:?} does not match {q_len}x{k_len}",
                    m.shape()
                ));
            }
        }
        if let Some(valid) = &spec.key_valid {
            if valid.len() != batch * k_len {
                return shape_err("key validity length mismatch");
            }
        }
        let dk = d / heads;
        let dv = dv_total / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut weights = vec![0.0; batch * heads * q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let qi = &qv.row(b * q_len + i)[h * dk..(h + 1) * dk];
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let lane = &mut weights[base..base + k_len];
                    for (j, w) in lane.iter_mut().enumerate() {
                        let kj = &kv.row(b * k_len + j)[h * dk..(h + 1) * dk];
                        let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        *w = dot * scale + spec.mask_term(b, i, j);
                    }
                    softmax_lanes(lane, 1, k_len, 1).map_err(|_| {
                        Error::Mask(format!(
                            "attention row {i} of batch entry {b} is fully masked"
                        ))
                    })?;
                }
            }
        }
        let keep = if training && spec.dropout > 0.0 {
            let s = 1.0 / (1.0 - spec.dropout);
            Some(
                weights
                    .iter()
                    .map(|_| {
                        if rng.gen::<f64>() < spec.dropout {
                            0.0
                        } else {
                            s
                        }
                    })
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        let mut out = vec![0.0; batch * q_len * dv_total];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let orow = (b * q_len + i) * dv_total + h * dv;
                    for j in 0..k_len {
                        let mut w = weights[base + j];
                        if let Some(keep) = &keep {
                            w *= keep[base + j];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(b * k_len + j)[h * dv..(h + 1) * dv];
                        for (o, x) in out[orow..orow + dv].iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * q_len, dv_total], out)?;
        let rg = self.needs(&[q, k, v]);
        let record = AttentionRecord {
            q,
            k,
            v,
            spec,
            weights,
            keep,
        };
        Ok(self.push(out, Op::Attention(Box::new(record)), rg))
    }

    /// Attention weights recorded by a fused attention node.
    pub fn attention_map(&self, v: Var) -> Option<AttentionMap<'_>> {
        match &self.nodes[v.0].op {
            Op::Attention(r) => Some(AttentionMap {
                spec: &r.spec,
                weights: &r.weights,
            }),
            _ => None,
        }
    }

    /// Every attention call recorded so far, in execution order.
    pub fn attention_maps(&self) -> Vec<AttentionMap<'_>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention(r) => Some(AttentionMap {
                    spec: &r.spec,
                    weights: &r.weights,
                }),
                _ => None,
            })
            .collect()
    }

    /// Mean token cross-entropy of `logits` (`positions x vocab`) against
    /// `targets`, skipping positions whose target is `pad`. With
    /// `smoothing > 0` the target distribution puts `1 - smoothing` on the
    /// gold token and spreads `smoothing` uniformly over the vocabulary.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        pad: u32,
        smoothing: f64,
    ) -> Result<Var> {
        let l = self.value(logits);
        let (rows, vocab) = l.dims2()?;
        if rows != targets.len() {
            return shape_err(format!("{rows} logit rows for {} targets", targets.len()));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t as usize >= vocab {
                return Err(Error::Vocabulary(format!(
                    "target id {t} outside vocabulary of {vocab}"
                )));
            }
            let row = l.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (p, v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            let nll = lse - row[t as usize];
            total += if smoothing > 0.0 {
                let mean_nll = row.iter().map(|v| lse - v).sum::<f64>() / vocab as f64;
                (1.0 - smoothing) * nll + smoothing * mean_nll
            } else {
                nll
            };
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(
                "cross-entropy over a fully padded target".into(),
            ));
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.needs(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            pad,
            smoothing,
            probs,
            count,
        };
        Ok(self.push(out, op, rg))
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that requires them. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accumulate(&mut self, v: Var, delta: impl Fn(usize) -> f64) {
        if let Some(g) = self.grad_buf(v) {
            for (i, x) in g.iter_mut().enumerate() {
                *x += delta(i);
            }
        }
    }

    fn propagate(&mut self, idx: usize, gout: &[f64]) {
        // The op is moved out while its inputs' gradients are updated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matrix");
                let n = self.value(b).dims2().expect("matrix").1;
                let Graph { nodes, grads } = self;
                if nodes[a.0].requires_grad {
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(
                        m,
                        n,
                        k,
                        gout,
                        Layout::Normal,
                        nodes[b.0].value.data(),
                        Layout::Transposed,
                        ga,
                        1.0,
                    );
                }
                if nodes[b.0].requires_grad {
                    let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(
                        k,
                        m,
                        n,
                        nodes[a.0].value.data(),
                        Layout::Transposed,
                        gout,
                        Layout::Normal,
                        gb,
                        1.0,
                    );
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(a).dims2().expect("matrix");
                self.accumulate(a, |i| gout[(i % c) * r + i / c]);
            }
            &Op::Add(a, b) => {
                self.accumulate(a, |i| gout[i]);
                self.accumulate(b, |i| gout[i]);
            }
            &Op::AddRow(a, row) => {
                self.accumulate(a, |i| gout[i]);
                let n = self.value(row).numel();
                if let Some(g) = self.grad_buf(row) {
                    for (i, v) in gout.iter().enumerate() {
                        g[i % n] += v;
                    }
                }
            }
            &Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |i| gout[i] * bv[i]);
                self.accumulate(b, |i| gout[i] * av[i]);
            }
            &Op::Scale(a, c) => self.accumulate(a, |i| gout[i] * c),
            &Op::Relu(a) => {
                let x = self.value(a).data().to_vec();
                self.accumulate(a, |i| if x[i] > 0.0 { gout[i] } else { 0.0 });
            }
            &Op::Tanh(a) => {
                let y = self.nodes[idx].value.data().to_vec();
                self.accumulate(a, |i| gout[i] * (1.0 - y[i] * y[i]));
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = self.nodes[idx].value.data().to_vec();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + i + j * inner;
                        let dot: f64 = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(x, |i| gx[i]);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let g = self.value(*gain).data().to_vec();
                let n = g.len();
                if let Some(gg) = self.grad_buf(*gain) {
                    for (i, v) in gout.iter().enumerate() {
                        gg[i % n] += v * normed[i];
                    }
                }
                if let Some(gb) = self.grad_buf(*bias) {
                    for (i, v) in gout.iter().enumerate() {
                        gb[i % n] += v;
                    }
                }
                if let Some(gx) = self.grad_buf(*x) {
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let dh: Vec<f64> = gout[span.clone()]
                            .iter()
                            .zip(&g)
                            .map(|(d, g)| d * g)
                            .collect();
                        let h = &normed[span.clone()];
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let k = inv / n as f64;
                        for (j, out) in gx[span].iter_mut().enumerate() {
                            *out += k * (n as f64 * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Dropout { x, keep } => self.accumulate(*x, |i| gout[i] * keep[i]),
            &Op::Sum(a) => self.accumulate(a, |_| gout[0]),
            Op::Embedding { table, ids } => {
                let width = self.value(*table).last_dim();
                if let Some(g) = self.grad_buf(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id as usize * width..(id as usize + 1) * width];
                        for (d, s) in dst.iter_mut().zip(&gout[r * width..(r + 1) * width]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).last_dim();
                    self.accumulate(p, |i| gout[(i / c) * total + offset + i % c]);
                    offset += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let cols = self.value(x).last_dim();
                let width = self.nodes[idx].value.last_dim();
                self.accumulate(x, |i| {
                    let (r, c) = (i / cols, i % cols);
                    if c >= start && c < start + width {
                        gout[r * width + c - start]
                    } else {
                        0.0
                    }
                });
            }
            Op::Attention(rec) => self.attention_backward(rec, gout),
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = gout[0] / *count as f64;
                let uniform = smoothing / vocab as f64;
                if let Some(g) = self.grad_buf(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        for j in 0..vocab {
                            let target = if j == t as usize {
                                1.0 - smoothing
                            } else {
                                0.0
                            } + uniform;
                            g[r * vocab + j] += scale * (probs[r * vocab + j] - target);
                        }
                    }
                }
            }
        }
        self.nodes[idx].op = op;
    }

    fn attention_backward(&mut self, rec: &AttentionRecord, gout: &[f64]) {
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = rec.spec;
        let d = self.value(rec.q).last_dim();
        let dv_total = self.value(rec.v).last_dim();
        let (dk, dv) = (d / heads, dv_total / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = self.value(rec.q).data().to_vec();
        let kv = self.value(rec.k).data().to_vec();
        let vv = self.value(rec.v).data().to_vec();
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * k_len;
                    let go = &gout[(b * q_len + i) * dv_total + h * dv..][..dv];
                    // dP' = dO V^T, dV += P'^T dO
                    for j in 0..k_len {
                        let vrow = (b * k_len + j) * dv_total + h * dv;
                        let keep = rec.keep.as_ref().map_or(1.0, |k| k[base + j]);
                        let w = rec.weights[base + j] * keep;
                        let mut acc = 0.0;
                        for t in 0..dv {
                            acc += go[t] * vv[vrow + t];
                            gv[vrow + t] += w * go[t];
                        }
                        dp[j] = acc * keep;
                    }
                    let p = &rec.weights[base..base + k_len];
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qrow = (b * q_len + i) * d + h * dk;
                    for j in 0..k_len {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * k_len + j) * d + h * dk;
                        for t in 0..dk {
                            gq[qrow + t] += ds * kv[krow + t];
                            gk[krow + t] += ds * qv[qrow + t];
                        }
                    }
                }
            }
        }
        self.accumulate(rec.q, |i| gq[i]);
        self.accumulate(rec.k, |i| gk[i]);
        self.accumulate(rec.v, |i| gv[i]);
    }
}

fn check_dropout_rate(rate: f64, training: bool) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1]")));
    }
    if training && rate == 1.0 {
        return Err(Error::Config(
            "dropout rate 1 leaves no survivors to rescale".into(),
        ));
    }
    Ok(())
}

/// Relative error between an analytic and a numeric gradient:
/// `|a - n| / max(|a|, |n|, 1e-6)` using Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-6)
}

/// Central finite-difference gradient of a scalar function of several
/// tensors with respect to input `which`.
pub fn numeric_gradient(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    mut f: impl FnMut(&[Tensor]) -> f64,
) -> Vec<f64> {
    let mut probe = inputs.to_vec();
    (0..inputs[which].numel())
        .map(|i| {
            let orig = inputs[which].data()[i];
            probe[which].data_mut()[i] = orig + step;
            let up = f(&probe);
            probe[which].data_mut()[i] = orig - step;
            let down = f(&probe);
            probe[which].data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Checks autodiff against central finite differences for every input of
/// `build`, which records a scalar loss from leaf variables. Returns the
/// worst relative error over all inputs.
pub fn gradient_check(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (which, &v) in vars.iter().enumerate() {
        let analytic = g
            .grad(v)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
        let numeric = numeric_gradient(inputs, which, step, |probe| {
            let mut g = Graph::new();
            let vars: Vec<Var> = probe.iter().map(|t| g.constant(t.clone())).collect();
            let loss = build(&mut g, &vars).expect("forward succeeded once");
            g.value(loss).data()[0]
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
