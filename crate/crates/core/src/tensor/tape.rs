//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op evaluates eagerly,
//! stores its value and whatever it needs for the backward sweep, and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in reverse creation order.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::{axis_split, kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a multi-head attention call over `[batch·seq × heads·head_dim]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    pub fn hidden(&self) -> usize {
        self.heads * self.head_dim
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Dropout(Var, Vec<f32>),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
        bias: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<i32>,
        ignore_index: i32,
        probs: Vec<f32>,
        count: usize,
    },
    KlSoft {
        student: Var,
        /// `softmax(student/T) − softmax(teacher/T)`
        residual: Vec<f32>,
        temperature: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    /// Gradient accumulated into `v` by the last backward sweep.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt inner dimensions differ: {:?} x {:?}^T",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_a_bt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMulBt(a, b), &[a, b], "matmul_bt")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds `bias[c]` to every row of `x[.. × c]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        if bv.numel() != c {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match last dimension of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (d, b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Scale(x, factor), &[x], "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| kernels::gelu(*v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Gelu(x), &[x], "gelu")
    }

    /// Inverted dropout; `keep` holds `0` or `1/(1-p)` per element.
    pub fn dropout(&mut self, x: Var, keep: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(Error::Dimension("dropout mask length".into()));
        }
        let data = xv.data().iter().zip(&keep).map(|(v, k)| v * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Dropout(x, keep), &[x], "dropout")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if d == 0 || gv.numel() != d || bv.numel() != d {
            return Err(Error::Dimension(format!(
                "layer norm over {:?} with gain {:?} and bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * d..(r + 1) * d];
            let (mean, rs) = kernels::mean_rstd(src, eps);
            rstd[r] = rs;
            for i in 0..d {
                let h = (src[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * gv.data()[i] + bv.data()[i];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let (outer, len, inner) = axis_split(xv.shape(), axis)?;
        let out = super::softmax(xv, axis)?;
        self.push(
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
            "softmax",
        )
    }

    /// Row lookup `table[ids]`, producing `[ids.len() × dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, dim) = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * dim);
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Data(format!(
                    "token id {id} at position {pos} is outside vocabulary of {vocab}"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), dim], out)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "embedding",
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let n = xv.rows();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Dimension(format!(
                    "row {r} out of range for {n} rows"
                )));
            }
            out.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
            "select_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x], "reshape")
    }

    /// Scaled dot-product multi-head attention with key padding mask.
    ///
    /// `q`, `k`, `v` are `[batch·seq × hidden]`; keys whose `key_mask` entry is
    /// false receive exactly zero probability.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (out, probs) = attention_core(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            dims,
            key_mask,
            &mut |a, b, m, kk, n| {
                let mut o = vec![0.0; m * n];
                kernels::matmul(a, b, &mut o, m, kk, n);
                Ok(o)
            },
        )?;
        let out = Tensor::new(vec![dims.batch * dims.seq, dims.hidden()], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                dims,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Attention probabilities `[batch, heads, seq, seq]` stored by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f32]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean cross-entropy over rows whose label is not `ignore_index`.
    ///
    /// When every row is ignored the loss is `0` and no gradient flows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i32], ignore_index: i32) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        let n = lv.rows();
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        let mut probs = vec![0.0; n * c];
        let mut logp = vec![0.0; c];
        let mut total = 0.0f32;
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if label == ignore_index {
                continue;
            }
            if label < 0 || label as usize >= c {
                return Err(Error::Data(format!(
                    "label {label} at row {r} outside [0, {c})"
                )));
            }
            kernels::log_softmax_row(lv.row(r), &mut logp);
            total -= logp[label as usize];
            count += 1;
            for (p, l) in probs[r * c..(r + 1) * c].iter_mut().zip(&logp) {
                *p = libm::expf(*l);
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f32
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_index,
                probs,
                count,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// `T² · mean_rows KL(softmax(teacher/T) ‖ softmax(student/T))`.
    ///
    /// The teacher is a plain tensor, so gradient reaches the student only.
    pub fn kl_soft_targets(
        &mut self,
        student: Var,
        teacher: &Tensor,
        temperature: f32,
    ) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let sv = self.value(student);
        if sv.shape() != teacher.shape() {
            return Err(Error::Dimension(format!(
                "student {:?} and teacher {:?} logits differ in shape",
                sv.shape(),
                teacher.shape()
            )));
        }
        let c = sv.last_dim();
        let rows = sv.rows();
        // f64 throughout: near-uniform softened distributions make the
        // log-ratio terms cancel, and T² then amplifies the rounding error
        let inv_t = 1.0 / temperature as f64;
        let mut residual = vec![0.0; rows * c];
        let mut log_t = vec![0.0f64; c];
        let mut log_s = vec![0.0f64; c];
        let mut total = 0.0f64;
        for r in 0..rows {
            log_softmax_scaled(teacher.row(r), inv_t, &mut log_t);
            log_softmax_scaled(sv.row(r), inv_t, &mut log_s);
            for j in 0..c {
                let (pt, ps) = (libm::exp(log_t[j]), libm::exp(log_s[j]));
                residual[r * c + j] = (ps - pt) as f32;
                total += pt * (log_t[j] - log_s[j]);
            }
        }
        let t = temperature as f64;
        let loss = (t * t * total / rows as f64) as f32;
        self.push(
            Tensor::scalar(loss),
            Op::KlSoft {
                student,
                residual,
                temperature,
            },
            &[student],
            "kl_soft_targets",
        )
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Backpropagate from `out` seeded with an explicit upstream gradient.
    pub fn backward_with(&mut self, out: Var, seed: &[f32]) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::Dimension("seed gradient length".into()));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[out.0] = Some(seed.to_vec());
        let Tape { nodes, grads } = self;
        for i in (0..=out.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f32>>],
    v: Var,
) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let node = &nodes[i];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                kernels::matmul_a_bt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                kernels::matmul_at_b_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::MatMulBt(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[0];
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let mut tmp = vec![0.0; m * k];
                kernels::matmul(g, bv.data(), &mut tmp, m, n, k);
                add_into(ga, &tmp);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                kernels::matmul_at_b_acc(g, av.data(), gb, m, n, k);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                add_into(gb, g);
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                let c = gb.len();
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s * f;
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                    *d += s * kernels::gelu_grad(*v);
                }
            }
        }
        Op::Dropout(x, keep) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for ((d, s), k) in gx.iter_mut().zip(g).zip(keep) {
                    *d += s * k;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gv = nodes[gain.0].value.data();
            let d = gv.len();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum = 0.0f32;
                    let mut sum_h = 0.0f32;
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        sum += dxhat[j];
                        sum_h += dxhat[j] * hr[j];
                    }
                    let inv_d = 1.0 / d as f32;
                    for j in 0..d {
                        gx[r * d + j] += rs * (dxhat[j] - inv_d * sum - hr[j] * inv_d * sum_h);
                    }
                }
            }
            if let Some(gg) = grad_buf(nodes, grads, *gain) {
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *bias) {
                for gr in g.chunks(d) {
                    add_into(gb, gr);
                }
            }
        }
        Op::Softmax {
            x,
            outer,
            len,
            inner,
        } => {
            let y = node.value.data();
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + ii;
                        let dot: f32 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = grad_buf(nodes, grads, *table) {
                let dim = nodes[table.0].value.shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    add_into(
                        &mut gt[id * dim..(id + 1) * dim],
                        &g[r * dim..(r + 1) * dim],
                    );
                }
            }
        }
        Op::SelectRows { x, rows } => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                let c = nodes[x.0].value.last_dim();
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                add_into(gx, g);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            dims,
            probs,
        } => {
            let (dq, dk, dv) = attention_backward(
                nodes[q.0].value.data(),
                nodes[k.0].value.data(),
                nodes[v.0].value.data(),
                *dims,
                probs,
                g,
            );
            if let Some(gq) = grad_buf(nodes, grads, *q) {
                add_into(gq, &dq);
            }
            if let Some(gk) = grad_buf(nodes, grads, *k) {
                add_into(gk, &dk);
            }
            if let Some(gv) = grad_buf(nodes, grads, *v) {
                add_into(gv, &dv);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            ignore_index,
            probs,
            count,
        } => {
            if *count == 0 {
                return;
            }
            let c = nodes[logits.0].value.last_dim();
            let scale = g[0] / *count as f32;
            if let Some(gl) = grad_buf(nodes, grads, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    if label == *ignore_index {
                        continue;
                    }
                    for j in 0..c {
                        let target = if j == label as usize { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::KlSoft {
            student,
            residual,
            temperature,
        } => {
            let rows = nodes[student.0].value.rows();
            let scale = g[0] * temperature / rows as f32;
            if let Some(gs) = grad_buf(nodes, grads, *student) {
                for (d, r) in gs.iter_mut().zip(residual) {
                    *d += scale * r;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

type MatmulFn<'a> = dyn FnMut(&[f32], &[f32], usize, usize, usize) -> Result<Vec<f32>> + 'a;

fn log_softmax_scaled(row: &[f32], scale: f64, out: &mut [f64]) {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v as f64 * scale));
    let sum: f64 = row.iter().map(|v| libm::exp(*v as f64 * scale - max)).sum();
    let log_z = max + libm::log(sum);
    for (o, v) in out.iter_mut().zip(row) {
        *o = *v as f64 * scale - log_z;
    }
}

/// Forward attention with pluggable matrix products.
///
/// `mm(a, b, m, k, n)` must return `a[m×k] · b[k×n]`. Returns the context
/// `[batch·seq × hidden]` and the probabilities `[batch, heads, seq, seq]`.
pub(crate) fn attention_core(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dims: AttentionDims,
    key_mask: &[bool],
    mm: &mut MatmulFn<'_>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let AttentionDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let hidden = dims.hidden();
    let rows = batch * seq;
    if q.len() != rows * hidden || k.len() != q.len() || v.len() != q.len() {
        return Err(Error::Dimension(format!(
            "attention inputs do not match batch {batch}, seq {seq}, hidden {hidden}"
        )));
    }
    if key_mask.len() != rows {
        return Err(Error::Dimension(format!(
            "key mask has {} entries for {rows} positions",
            key_mask.len()
        )));
    }
    let scale = 1.0 / libm::sqrtf(head_dim as f32);
    let mut out = vec![0.0; rows * hidden];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let mut qh = vec![0.0; seq * head_dim];
    let mut kt = vec![0.0; head_dim * seq];
    let mut vh = vec![0.0; seq * head_dim];
    for b in 0..batch {
        let mask = &key_mask[b * seq..(b + 1) * seq];
        for h in 0..heads {
            for i in 0..seq {
                let src = (b * seq + i) * hidden + h * head_dim;
                for t in 0..head_dim {
                    qh[i * head_dim + t] = q[src + t];
                    kt[t * seq + i] = k[src + t];
                    vh[i * head_dim + t] = v[src + t];
                }
            }
            let mut scores = mm(&qh, &kt, seq, head_dim, seq)?;
            for s in scores.iter_mut() {
                *s *= scale;
            }
            for row in scores.chunks_mut(seq) {
                masked_softmax(row, mask);
            }
            let ctx = mm(&scores, &vh, seq, seq, head_dim)?;
            for i in 0..seq {
                let dst = (b * seq + i) * hidden + h * head_dim;
                out[dst..dst + head_dim].copy_from_slice(&ctx[i * head_dim..(i + 1) * head_dim]);
            }
            let base = (b * heads + h) * seq * seq;
            probs[base..base + seq * seq].copy_from_slice(&scores);
        }
    }
    Ok((out, probs))
}

fn masked_softmax(row: &mut [f32], mask: &[bool]) {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold(f32::NEG_INFINITY, |acc, (v, _)| acc.max(*v));
    let mut sum = 0.0f32;
    for (v, m) in row.iter_mut().zip(mask) {
        if *m {
            *v = libm::expf(*v - max);
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    if sum > 0.0 {
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    dims: AttentionDims,
    probs: &[f32],
    g: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let AttentionDims {
        batch,
        seq,
        heads,
        head_dim,
    } = dims;
    let hidden = dims.hidden();
    let scale = 1.0 / libm::sqrtf(head_dim as f32);
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut qh = vec![0.0; seq * head_dim];
    let mut kh = vec![0.0; seq * head_dim];
    let mut vh = vec![0.0; seq * head_dim];
    let mut gh = vec![0.0; seq * head_dim];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let src = (b * seq + i) * hidden + h * head_dim;
                qh[i * head_dim..(i + 1) * head_dim].copy_from_slice(&q[src..src + head_dim]);
                kh[i * head_dim..(i + 1) * head_dim].copy_from_slice(&k[src..src + head_dim]);
                vh[i * head_dim..(i + 1) * head_dim].copy_from_slice(&v[src..src + head_dim]);
                gh[i * head_dim..(i + 1) * head_dim].copy_from_slice(&g[src..src + head_dim]);
            }
            let base = (b * heads + h) * seq * seq;
            let p = &probs[base..base + seq * seq];
            // dV = Pᵀ · dCtx
            let mut dvh = vec![0.0; seq * head_dim];
            kernels::matmul_at_b_acc(p, &gh, &mut dvh, seq, seq, head_dim);
            // dP = dCtx · Vᵀ
            let mut dp = vec![0.0; seq * seq];
            kernels::matmul_a_bt_acc(&gh, &vh, &mut dp, seq, head_dim, seq);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the 1/√d factor
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            let mut dqh = vec![0.0; seq * head_dim];
            kernels::matmul(&dp, &kh, &mut dqh, seq, seq, head_dim);
            let mut dkh = vec![0.0; seq * head_dim];
            kernels::matmul_at_b_acc(&dp, &qh, &mut dkh, seq, seq, head_dim);
            for i in 0..seq {
                let dst = (b * seq + i) * hidden + h * head_dim;
                add_into(
                    &mut dq[dst..dst + head_dim],
                    &dqh[i * head_dim..(i + 1) * head_dim],
                );
                add_into(
                    &mut dk[dst..dst + head_dim],
                    &dkh[i * head_dim..(i + 1) * head_dim],
                );
                add_into(
                    &mut dv[dst..dst + head_dim],
                    &dvh[i * head_dim..(i + 1) * head_dim],
                );
            }
        }
    }
    (dq, dk, dv)
}
