//! The recording tape and every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernels::{axpy, dot, gemm};
use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call.
///
/// Queries are `[batch * query_len, d]`, keys and values `[batch * key_len, d]`.
/// Keys at positions `>= key_lens[b]` are masked out; with `causal`, query `i`
/// additionally sees only keys `0..=i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A single-use tape. Build the forward pass through its methods, then call
/// [`Graph::backward`].
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// An evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// A training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf without a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `[.., k] · [k, n] -> [.., n]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.cols() != bv.shape()[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::Add(a, b)))
    }

    /// Adds a `[d]` vector to every last-axis slice of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(TensorError::shape(
                "add_row",
                format!("{:?} + {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(rv.len()) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Relu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(av.cols()) {
            softmax_in_place(row);
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), rg, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// LayerNorm over the last axis with trainable gain and bias, using the
    /// population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.value(p).len() != d {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!(
                        "{name} has {} values, last axis is {d}",
                        self.value(p).len()
                    ),
                ));
            }
        }
        self.layer_norm_impl(x, Some((gain, bias)), eps)
    }

    /// LayerNorm without gain or bias.
    pub fn layer_norm_simple(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.layer_norm_impl(x, None, eps)
    }

    fn layer_norm_impl(&mut self, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for (r, (src, dst)) in xv
            .data()
            .chunks_exact(d)
            .zip(normalized.chunks_exact_mut(d))
            .enumerate()
        {
            // A constant row centres to exact zeros even when the summed mean rounds.
            let mean = if src.iter().all(|&v| v == src[0]) {
                src[0]
            } else {
                src.iter().sum::<f64>() / d as f64
            };
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
        }
        let out = match affine {
            Some((g, b)) => {
                let (gv, bv) = (self.value(g).data(), self.value(b).data());
                let mut out = normalized.clone();
                for row in out.chunks_exact_mut(d) {
                    for j in 0..d {
                        row[j] = row[j] * gv[j] + bv[j];
                    }
                }
                out
            }
            None => normalized.clone(),
        };
        let shape = xv.shape().to_vec();
        let rg = match affine {
            Some((g, b)) => self.rg(&[x, g, b]),
            None => self.rg(&[x]),
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::LayerNorm {
                x,
                affine,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(TensorError::shape(
                "embedding",
                format!("table {:?}", tv.shape()),
            ));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::domain(
                "embedding",
                format!("id {bad} outside vocabulary of {vocab}"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::shape(
                    "concat",
                    format!("{:?} vs {:?}", self.shape(first), s),
                ));
            }
        }
        let rows = self.value(first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Concat(parts.to_vec()),
        ))
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout p must be in [0, 1), got {p}"
            )));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::Dropout { x, mask }))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("{rows} rows but {} targets", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(TensorError::domain(
                "cross_entropy",
                format!("target {bad} outside {vocab} classes"),
            ));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::domain(
                "cross_entropy",
                "no non-padding targets",
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut nll = 0.0;
        for (row, t) in probs.chunks_exact_mut(vocab).zip(targets) {
            match t {
                Some(t) => {
                    let lse = log_sum_exp(row);
                    nll += lse - row[*t];
                    for p in row.iter_mut() {
                        *p = (*p - lse).exp();
                    }
                }
                None => row.fill(0.0),
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(nll / count as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Scaled dot-product attention over `spec.heads` heads; returns
    /// `[batch * query_len, d]` with heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let d = self.value(q).cols();
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(TensorError::shape("attention", what.to_string()))
            }
        };
        check(
            spec.heads > 0 && d.is_multiple_of(spec.heads),
            "d not divisible by heads",
        )?;
        check(
            self.value(q).rows() == spec.batch * spec.query_len,
            "query rows",
        )?;
        check(
            self.value(k).rows() == spec.batch * spec.key_len,
            "key rows",
        )?;
        check(
            self.value(v).rows() == spec.batch * spec.key_len,
            "value rows",
        )?;
        check(
            self.value(k).cols() == d && self.value(v).cols() == d,
            "width",
        )?;
        check(spec.key_lens.len() == spec.batch, "key_lens length")?;
        check(
            spec.key_lens.iter().all(|&l| l >= 1 && l <= spec.key_len),
            "key_lens out of range",
        )?;
        check(
            !spec.causal || spec.query_len <= spec.key_len,
            "causal needs query_len <= key_len",
        )?;

        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (tq, tk, h) = (spec.query_len, spec.key_len, spec.heads);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; spec.batch * h * tq * tk];
        let mut out = vec![0.0; spec.batch * tq * d];
        for b in 0..spec.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..tq {
                    let limit = visible_keys(&spec, b, i);
                    let qi = &qd[(b * tq + i) * d + off..][..dh];
                    let prow = &mut probs[((b * h + head) * tq + i) * tk..][..tk];
                    for j in 0..limit {
                        let kj = &kd[(b * tk + j) * d + off..][..dh];
                        prow[j] = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut prow[..limit]);
                    let orow = &mut out[(b * tq + i) * d + off..][..dh];
                    for j in 0..limit {
                        let vj = &vd[(b * tk + j) * d + off..][..dh];
                        axpy(prow[j], vj, orow);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![spec.batch * tq, d], out),
            rg,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar. Each node is visited once, in reverse
    /// recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| TensorError::Usage(format!("{loss:?} is not on this tape")))?;
        if node.value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(TensorError::Usage(
                "loss does not depend on any parameter on this tape".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, gy, false, bv.data(), true, ga, 1.0);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, av.data(), true, gy, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if wants(x) {
                        axpy(1.0, gy, slot(grads, x, gy.len()));
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    axpy(1.0, gy, slot(grads, *a, gy.len()));
                }
                if wants(*row) {
                    let d = self.nodes[row.0].value.len();
                    let gr = slot(grads, *row, d);
                    for chunk in gy.chunks_exact(d) {
                        axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = slot(grads, *a, gy.len());
                    for ((g, y), o) in ga.iter_mut().zip(gy).zip(val(*b)) {
                        *g += y * o;
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, gy.len());
                    for ((g, y), o) in gb.iter_mut().zip(gy).zip(val(*a)) {
                        *g += y * o;
                    }
                }
            }
            Op::Scale(a, s) => axpy(*s, gy, slot(grads, *a, gy.len())),
            Op::Relu(a) => {
                let ga = slot(grads, *a, gy.len());
                for ((g, y), x) in ga.iter_mut().zip(gy).zip(val(*a)) {
                    if *x > 0.0 {
                        *g += y;
                    }
                }
            }
            Op::Softmax(a) => {
                let out = node.value.data();
                let d = node.value.cols();
                let ga = slot(grads, *a, gy.len());
                for ((g, y), o) in ga
                    .chunks_exact_mut(d)
                    .zip(gy.chunks_exact(d))
                    .zip(out.chunks_exact(d))
                {
                    let s = dot(y, o);
                    for j in 0..d {
                        g[j] += o[j] * (y[j] - s);
                    }
                }
            }
            Op::Sum(a) => {
                let ga = slot(grads, *a, self.nodes[a.0].value.len());
                for g in ga.iter_mut() {
                    *g += gy[0];
                }
            }
            Op::LayerNorm {
                x,
                affine,
                normalized,
                inv_std,
            } => {
                let d = node.value.cols();
                let gain = affine.map(|(g, _)| val(g));
                if let Some((g, b)) = affine {
                    if wants(*g) {
                        let gg = slot(grads, *g, d);
                        for (y, n) in gy.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += y[j] * n[j];
                            }
                        }
                    }
                    if wants(*b) {
                        let gb = slot(grads, *b, d);
                        for y in gy.chunks_exact(d) {
                            axpy(1.0, y, gb);
                        }
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, gy.len());
                    let mut dn = vec![0.0; d];
                    for (r, ((g, y), n)) in gx
                        .chunks_exact_mut(d)
                        .zip(gy.chunks_exact(d))
                        .zip(normalized.chunks_exact(d))
                        .enumerate()
                    {
                        match gain {
                            Some(gv) => {
                                for j in 0..d {
                                    dn[j] = y[j] * gv[j];
                                }
                            }
                            None => dn.copy_from_slice(y),
                        }
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dot(&dn, n) / d as f64;
                        for j in 0..d {
                            g[j] += inv_std[r] * (dn[j] - mean_dn - n[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                let len = self.nodes[table.0].value.len();
                let gt = slot(grads, *table, len);
                for (row, &id) in gy.chunks_exact(d).zip(ids) {
                    axpy(1.0, row, &mut gt[id * d..(id + 1) * d]);
                }
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if wants(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &gy[r * total + offset..r * total + offset + w],
                                &mut gp[r * w..(r + 1) * w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::Dropout { x, mask } => {
                let gx = slot(grads, *x, gy.len());
                for ((g, y), m) in gx.iter_mut().zip(gy).zip(mask) {
                    *g += y * m;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.nodes[logits.0].value.cols();
                let scale = gy[0] / *count as f64;
                let gl = slot(grads, *logits, probs.len());
                for ((g, p), t) in gl
                    .chunks_exact_mut(vocab)
                    .zip(probs.chunks_exact(vocab))
                    .zip(targets)
                {
                    if let Some(t) = t {
                        axpy(scale, p, g);
                        g[*t] -= scale;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, gy, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let d = self.nodes[q.0].value.cols();
        let (tq, tk, h) = (spec.query_len, spec.key_len, spec.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; qd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gv = vec![0.0; vd.len()];
        let mut dp = vec![0.0; tk];
        for b in 0..spec.batch {
            for head in 0..h {
                let off = head * dh;
                for i in 0..tq {
                    let limit = visible_keys(spec, b, i);
                    let prow = &probs[((b * h + head) * tq + i) * tk..][..tk];
                    let go = &gy[(b * tq + i) * d + off..][..dh];
                    for j in 0..limit {
                        let vj = &vd[(b * tk + j) * d + off..][..dh];
                        dp[j] = dot(go, vj);
                        axpy(prow[j], go, &mut gv[(b * tk + j) * d + off..][..dh]);
                    }
                    let s: f64 = (0..limit).map(|j| prow[j] * dp[j]).sum();
                    let qi = &qd[(b * tq + i) * d + off..][..dh];
                    for j in 0..limit {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kd[(b * tk + j) * d + off..][..dh];
                        axpy(ds, kj, &mut gq[(b * tq + i) * d + off..][..dh]);
                        axpy(ds, qi, &mut gk[(b * tk + j) * d + off..][..dh]);
                    }
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                axpy(1.0, &g, slot(grads, var, g.len()));
            }
        }
    }
}

fn visible_keys(spec: &AttentionSpec, b: usize, i: usize) -> usize {
    let len = spec.key_lens[b];
    if spec.causal {
        len.min(i + 1)
    } else {
        len
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Result of a reverse sweep. Only leaves keep their gradient.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` was not reached from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when unreached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LAYER_NORM_EPS;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn layer_norm_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert!(close(g.value(y).data(), &[-1.22474, 0.0, 1.22474], 1e-3));
    }

    #[test]
    fn layer_norm_gain_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let gain = g.constant(Tensor::full(&[3], 2.0));
        let bias = g.constant(Tensor::ones(&[3]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert!(close(g.value(y).data(), &[-1.44949, 1.0, 3.44949], 1e-3));
    }

    #[test]
    fn layer_norm_constant_input_returns_bias_exactly() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4], 7.25));
        let gain = g.constant(t(&[4], &[3.0, -1.0, 0.5, 2.0]));
        let bias = g.constant(t(&[4], &[0.1, 0.2, -0.3, 4.0]));
        let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, -0.3, 4.0]);
    }

    #[test]
    fn layer_norm_rejects_mismatched_params() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3]));
        let gain = g.constant(Tensor::ones(&[4]));
        let bias = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(
            g.layer_norm(x, gain, bias, LAYER_NORM_EPS),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn layer_norm_simple_examples() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.layer_norm_simple(x, LAYER_NORM_EPS).unwrap();
        assert!(close(g.value(y).data(), &[-1.22474, 0.0, 1.22474], 1e-3));
        let c = g.constant(t(&[2], &[5.0, 5.0]));
        let z = g.layer_norm_simple(c, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.value(z).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let loss = g.cross_entropy(x, &[Some(0), Some(3), None]).unwrap();
        assert!((g.value(loss).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_all_padding_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.cross_entropy(x, &[None, None]),
            Err(TensorError::Domain { .. })
        ));
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let av = g.constant(a.clone());
        let y = g.matmul(eye, av).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[10]));
        assert_eq!(g.dropout(x, 0.5).unwrap(), x);
        assert!(g.dropout(x, 1.0).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut g = Graph::training(3);
        let x = g.param(Tensor::ones(&[20000]));
        let y = g.dropout(x, 0.1).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / 20000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let unused = g.param(t(&[3], &[1.0, 1.0, 1.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, 3), vec![0.0; 3]);
    }

    #[test]
    fn backward_usage_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::Usage(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(TensorError::Usage(_))));
    }

    #[test]
    fn layer_norm_simple_has_no_parameter_inputs() {
        let mut g = Graph::new();
        let before = g.len();
        let x = g.param(t(&[3], &[1.0, 2.0, 4.0]));
        let y = g.layer_norm_simple(x, LAYER_NORM_EPS).unwrap();
        assert_eq!(g.len(), before + 2);
        let w = g.constant(t(&[3], &[1.0, -2.0, 0.5]));
        let p = g.mul(y, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let spec = AttentionSpec {
            batch: 1,
            query_len: 3,
            key_len: 3,
            heads: 2,
            key_lens: vec![3],
            causal: true,
        };
        let base: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut perturbed = base.clone();
        for v in &mut perturbed[8..] {
            *v += 1.0;
        }
        let run = |data: &[f64]| {
            let mut g = Graph::new();
            let x = g.constant(t(&[3, 4], data));
            let y = g.attention(x, x, x, spec.clone()).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(&base), run(&perturbed));
        assert_eq!(&a.data()[..8], &b.data()[..8]);
    }
}
