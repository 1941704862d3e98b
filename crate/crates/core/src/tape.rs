//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends one
//! node holding its output value plus whatever it needs for the backward rule;
//! inputs always precede outputs, so a single reverse sweep visits every node
//! exactly once. Parameters are bound by reference to a [`ParamStore`] and
//! never copied onto the tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges `(start, len)` that form independent sequences.
pub type Segments = Vec<(usize, usize)>;

/// Masking rule applied inside every attention segment.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Row-major `len_q × len_k` allow-list; only valid with a single segment.
    Custom(Vec<bool>),
}

impl AttnMask {
    #[inline]
    fn allows(&self, i: usize, j: usize, len_k: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => j <= i,
            AttnMask::Custom(m) => m[i * len_k + j],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub q_segments: Segments,
    pub k_segments: Segments,
    pub mask: AttnMask,
}

impl AttnLayout {
    pub fn self_attention(segments: Segments, mask: AttnMask) -> Self {
        AttnLayout {
            q_segments: segments.clone(),
            k_segments: segments,
            mask,
        }
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherCols {
        x: Var,
        cols: Vec<usize>,
    },
    ScaleRowsBy {
        x: Var,
        s: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; leaves are created explicitly.
    pub fn new() -> Self {
        Tape {
            store: None,
            nodes: Vec::new(),
            bound: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Tape {
            store: Some(store),
            nodes: Vec::with_capacity(512),
            bound: vec![None; store.len()],
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing requires a gradient.
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut t = Self::with_params(store);
        t.grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.expect("param node without store").tensor(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value into a fresh leaf that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let rg = store.is_trainable(id) && self.grad_enabled;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// `x[m×n] + bias[n]`, the only broadcast the tape supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(x);
        if self.value(bias).numel() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(x, c), rg)
    }

    /// Adds a constant tensor of identical shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(Error::Dimension {
                op: "add_const",
                lhs: self.value(x).shape().to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = c.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Relu(x), rg)
    }

    /// Softmax along the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Per-row normalisation over the last axis followed by `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Fused multi-head scaled dot-product attention on already-projected
    /// `q [Σlen_q × d]`, `k`, `v [Σlen_k × d]`. Query segment `s` attends only
    /// to key segment `s`; masked pairs get probability zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: AttnLayout) -> Result<Var> {
        let (mq, d) = self.dims(q);
        let (mk, dk) = self.dims(k);
        let (mv, dv) = self.dims(v);
        if d != dk || d != dv || mk != mv || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: self.value(q).shape().to_vec(),
                rhs: self.value(k).shape().to_vec(),
            });
        }
        if layout.q_segments.len() != layout.k_segments.len() {
            return Err(Error::Contract("attention segment counts differ".into()));
        }
        if matches!(layout.mask, AttnMask::Custom(_)) && layout.q_segments.len() != 1 {
            return Err(Error::Contract("custom attention mask needs exactly one segment".into()));
        }
        // query segments tile the rows; key segments may repeat (one encoder
        // memory shared by several decoder sequences)
        let covered: usize = layout.q_segments.iter().map(|s| s.1).sum();
        if covered != mq
            || layout.q_segments.iter().any(|&(s, l)| s + l > mq)
            || layout.k_segments.iter().any(|&(s, l)| s + l > mk)
        {
            return Err(Error::Contract(format!(
                "attention segments cover {covered} of {mq} query rows or exceed {mk} key rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let prob_len: usize = layout
            .q_segments
            .iter()
            .zip(&layout.k_segments)
            .map(|(a, b)| a.1 * b.1 * heads)
            .sum();
        let mut probs = vec![0.0; prob_len];
        let mut out = vec![0.0; mq * d];
        let mut off = 0;
        let mut scores = Vec::new();
        for (&(qs, ql), &(ks, kl)) in layout.q_segments.iter().zip(&layout.k_segments) {
            if let AttnMask::Custom(m) = &layout.mask {
                if m.len() != ql * kl {
                    return Err(Error::Dimension {
                        op: "attention_mask",
                        lhs: vec![ql, kl],
                        rhs: vec![m.len()],
                    });
                }
            }
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..ql {
                    let qrow = &qd[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                    scores.clear();
                    for j in 0..kl {
                        if layout.mask.allows(i, j, kl) {
                            let krow = &kd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                            scores.push(dot(qrow, krow) * scale);
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    let p = &mut probs[off + i * kl..off + (i + 1) * kl];
                    math::softmax_into(&scores, p);
                    let orow = &mut out[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
                off += ql * kl;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(mq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Tokenization { id, vocab });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Dimension {
                    op: "gather_rows",
                    lhs: vec![m, n],
                    rhs: vec![r],
                });
            }
            out.extend_from_slice(&xs[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), n, out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero `total × n` output.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if rows.len() != m || rows.iter().any(|&r| r >= total) {
            return Err(Error::Dimension {
                op: "scatter_rows",
                lhs: vec![m, n],
                rhs: vec![rows.len(), total],
            });
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; total * n];
        for (i, &r) in rows.iter().enumerate() {
            for c in 0..n {
                out[r * n + c] += xs[i * n + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(total, n, out)?,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row column gather: `cols` holds `k` column indices for each of the
    /// `m` rows; output is `m × k`.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize], k: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if cols.len() != m * k || cols.iter().any(|&c| c >= n) {
            return Err(Error::Dimension {
                op: "gather_cols",
                lhs: vec![m, n],
                rhs: vec![cols.len()],
            });
        }
        let xs = self.value(x).data();
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| xs[(i / k) * n + c])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(m, k, out)?,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// `out[r] = x[r] * s.flat[idx[r]]`: one scalar weight per row.
    pub fn scale_rows_by(&mut self, x: Var, s: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        let sn = self.value(s).numel();
        if idx.len() != m || idx.iter().any(|&i| i >= sn) {
            return Err(Error::Dimension {
                op: "scale_rows_by",
                lhs: vec![m, n],
                rhs: vec![idx.len(), sn],
            });
        }
        let xs = self.value(x).data();
        let sd = self.value(s).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let w = sd[idx[r]];
            for c in 0..n {
                out[r * n + c] = xs[r * n + c] * w;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScaleRowsBy {
                x,
                s,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-Σ target · log_softmax(logits)`. Each target row must
    /// be a distribution (sum 1 within `1e-6`).
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if target.rows() != m || target.cols() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.value(logits).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        for r in 0..m {
            let s: f64 = target.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 || target.row(r).iter().any(|&t| t < 0.0) {
                return Err(Error::Validation(format!(
                    "cross-entropy target row {r} sums to {s}, expected 1"
                )));
            }
        }
        let lt = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let row = lt.row(r);
            let lse = math::log_sum_exp(row);
            let trow = target.row(r);
            for c in 0..n {
                let lp = row[c] - lse;
                probs[r * n + c] = math::exp(lp);
                if trow[c] != 0.0 {
                    loss -= trow[c] * lp;
                }
            }
        }
        loss /= m as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `Σ_c softplus(z) − y·z`, i.e. independent binary
    /// cross-entropy per column. Targets must lie in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if target.rows() != m || target.cols() != n {
            return Err(Error::Dimension {
                op: "bce_with_logits",
                lhs: self.value(logits).shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if target.data().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::Validation("binary cross-entropy targets must lie in [0, 1]".into()));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m * n {
            // softplus(z) = max(z, 0) + ln(1 + e^-|z|)
            let softplus = z[i].max(0.0) + math::ln(1.0 + math::exp(-z[i].abs()));
            loss += softplus - target.data()[i] * z[i];
            probs[i] = math::sigmoid(z[i]);
        }
        loss /= m as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar. Returns gradients for every node that
    /// requires one; parameter gradients are gathered per [`ParamId`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut param_grads: Vec<Option<Vec<f64>>> = Vec::new();
        if let Some(store) = self.store {
            param_grads.resize_with(store.len(), || None);
            for (pid, slot) in self.bound.iter().enumerate() {
                if let Some(v) = slot {
                    if let Some(g) = &grads[v.0] {
                        param_grads[pid] = Some(g.clone());
                    }
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: ParamGrads { grads: param_grads },
        })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let buf = |grads: &mut [Option<Vec<f64>>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.value(v).numel()]);
            }
            true
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if buf(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    matmul_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if buf(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if buf(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    matmul_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if buf(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    matmul_tn_acc(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if buf(grads, v) {
                        axpy(grads[v.0].as_mut().unwrap(), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if buf(grads, *x) {
                    axpy(grads[x.0].as_mut().unwrap(), g);
                }
                if buf(grads, *bias) {
                    let n = self.value(*bias).numel();
                    let gb = grads[bias.0].as_mut().unwrap();
                    for row in g.chunks(n) {
                        axpy(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if buf(grads, *a) {
                    let bd = self.value(*b).data();
                    let ga = grads[a.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if buf(grads, *b) {
                    let ad = self.value(*a).data();
                    let gb = grads[b.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if buf(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::AddConst(x) => {
                if buf(grads, *x) {
                    axpy(grads[x.0].as_mut().unwrap(), g);
                }
            }
            Op::Relu(x) => {
                if buf(grads, *x) {
                    let xd = self.value(*x).data();
                    let gx = grads[x.0].as_mut().unwrap();
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if buf(grads, *x) {
                    let y = self.value(Var(idx)).data();
                    let n = self.value(*x).cols();
                    let gx = grads[x.0].as_mut().unwrap();
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let s = dot(yr, gr);
                        for c in 0..n {
                            gx[r * n + c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).numel();
                let m = xhat.len() / n;
                if buf(grads, *gamma) {
                    let gg = grads[gamma.0].as_mut().unwrap();
                    for i in 0..m * n {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if buf(grads, *beta) {
                    let gb = grads[beta.0].as_mut().unwrap();
                    for row in g.chunks(n) {
                        axpy(gb, row);
                    }
                }
                if buf(grads, *x) {
                    let gam = self.value(*gamma).data();
                    let gx = grads[x.0].as_mut().unwrap();
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gam[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, layout, probs, g, grads),
            Op::Embedding { table, ids } => {
                if buf(grads, *table) {
                    let d = self.value(*table).cols();
                    let gt = grads[table.0].as_mut().unwrap();
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if buf(grads, *x) {
                    let n = self.value(*x).cols();
                    let gx = grads[x.0].as_mut().unwrap();
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ScatterRows { x, rows } => {
                if buf(grads, *x) {
                    let n = self.value(*x).cols();
                    let gx = grads[x.0].as_mut().unwrap();
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::GatherCols { x, cols } => {
                if buf(grads, *x) {
                    let (m, n) = self.dims(*x);
                    let k = cols.len() / m.max(1);
                    let gx = grads[x.0].as_mut().unwrap();
                    for (i, &c) in cols.iter().enumerate() {
                        gx[(i / k) * n + c] += g[i];
                    }
                }
            }
            Op::ScaleRowsBy { x, s, idx: sidx } => {
                let n = self.value(*x).cols();
                if buf(grads, *x) {
                    let sd = self.value(*s).data();
                    let gx = grads[x.0].as_mut().unwrap();
                    for (r, &si) in sidx.iter().enumerate() {
                        let w = sd[si];
                        for c in 0..n {
                            gx[r * n + c] += g[r * n + c] * w;
                        }
                    }
                }
                if buf(grads, *s) {
                    let xd = self.value(*x).data();
                    let gs = grads[s.0].as_mut().unwrap();
                    for (r, &si) in sidx.iter().enumerate() {
                        gs[si] += dot(&g[r * n..(r + 1) * n], &xd[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::Sum(x) => {
                if buf(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if buf(grads, *logits) {
                    let (m, n) = self.dims(*logits);
                    let scale = g[0] / m as f64;
                    let gl = grads[logits.0].as_mut().unwrap();
                    for r in 0..m {
                        let tsum: f64 = target[r * n..(r + 1) * n].iter().sum();
                        for c in 0..n {
                            let i = r * n + c;
                            gl[i] += scale * (probs[i] * tsum - target[i]);
                        }
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                target,
                probs,
            } => {
                if buf(grads, *logits) {
                    let scale = g[0] / self.dims(*logits).0 as f64;
                    let gl = grads[logits.0].as_mut().unwrap();
                    for i in 0..gl.len() {
                        gl[i] += scale * (probs[i] - target[i]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let (rq, rk, rv) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let mut gq = if rq { vec![0.0; qd.len()] } else { Vec::new() };
        let mut gk = if rk { vec![0.0; kd.len()] } else { Vec::new() };
        let mut gv = if rv { vec![0.0; vd.len()] } else { Vec::new() };
        let mut dp = Vec::new();
        let mut off = 0;
        for (&(qs, ql), &(ks, kl)) in layout.q_segments.iter().zip(&layout.k_segments) {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..ql {
                    let p = &probs[off + i * kl..off + (i + 1) * kl];
                    let go = &g[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                    dp.clear();
                    for j in 0..kl {
                        let vrow = &vd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                        dp.push(dot(go, vrow));
                        if rv && p[j] != 0.0 {
                            let gvr = &mut gv[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                            for (o, &x) in gvr.iter_mut().zip(go) {
                                *o += p[j] * x;
                            }
                        }
                    }
                    let s = dot(p, &dp);
                    for j in 0..kl {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        if rq {
                            let krow = &kd[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                            let gqr = &mut gq[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                            for (o, &x) in gqr.iter_mut().zip(krow) {
                                *o += ds * x;
                            }
                        }
                        if rk {
                            let qrow = &qd[(qs + i) * d + c0..(qs + i) * d + c0 + dh];
                            let gkr = &mut gk[(ks + j) * d + c0..(ks + j) * d + c0 + dh];
                            for (o, &x) in gkr.iter_mut().zip(qrow) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                off += ql * kl;
            }
        }
        for (var, local, needed) in [(q, gq, rq), (k, gk, rk), (v, gv, rv)] {
            if !needed {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => axpy(existing, &local),
                slot @ None => *slot = Some(local),
            }
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require a gradient or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id)
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

/// Gradients indexed by parameter slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new(n_params: usize) -> Self {
        let mut grads = Vec::new();
        grads.resize_with(n_params, || None);
        ParamGrads { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.grads.get_mut(id.index()).and_then(|g| g.as_mut())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` slot by slot, in slot order.
    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize_with(other.grads.len(), || None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => axpy(m, t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        math::sqrt(sq)
    }

    /// Rescales so the global norm is at most `max_norm`; returns the
    /// pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}
