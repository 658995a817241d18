//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to run its adjoint. Fused operations (attention,
//! segment attention, mixture NLL, Gaussian KL, convolutions) carry
//! hand-written backward passes; everything else is elementwise or a GEMM.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    lq: usize,
    lk: usize,
    heads: usize,
    probs: Vec<f64>,
}

struct SegmentSaved {
    src: Var,
    dst: Var,
    z: Var,
    seg: Arc<Vec<usize>>,
    groups: usize,
    heads: usize,
    slope: f64,
    alpha: Vec<f64>,
    positive: Vec<bool>,
}

struct GmmSaved {
    logits: Var,
    means: Var,
    log_vars: Var,
    target: Var,
    k: usize,
    dim: usize,
    resp: Vec<f64>,
    weights: Vec<f64>,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<Vec<Option<usize>>>),
    ScatterAddRows(Var, Arc<Vec<usize>>),
    SumAll(Var),
    RowSum(Var),
    MulCol(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Attention(Box<AttentionSaved>),
    HeadDot { x: Var, a: Var, heads: usize },
    HeadMean { x: Var, heads: usize },
    SegmentAttention(Box<SegmentSaved>),
    MaskedSoftmax { x: Var, mask: Arc<Vec<bool>> },
    GmmNll(Box<GmmSaved>),
    KlDiag { mq: Var, lq: Var, mp: Var, lp: Var },
    OnehotConv { w: Var, b: Var, classes: Arc<Vec<u8>>, n_classes: usize, height: usize, width: usize },
    Conv3x3 { x: Var, w: Var, b: Var, c_in: usize, height: usize, width: usize },
    AvgPool2 { x: Var, channels: usize, height: usize, width: usize },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Gradients of one scalar output with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node; intermediate gradients are not kept.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.leaf(Tensor::zeros(rows, cols))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same var
    /// so gradient contributions accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node { value: store.shared(id), op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v`'s value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch ({m}x{k} * {k2}x{n})");
        let mut out = Tensor::zeros(m, n);
        gemm(self.value(a).data(), false, self.value(b).data(), false, out.data_mut(), m, k, n, 0.0);
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(bias);
        assert_eq!(tb.rows(), 1);
        assert_eq!(ta.cols(), tb.cols(), "bias width mismatch");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(t, Op::Elu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(t, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `i` is row `idx[i]` of `a`, or zeros for `None`.
    pub fn gather_rows_opt(&mut self, a: Var, idx: Arc<Vec<Option<usize>>>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                out.row_mut(i).copy_from_slice(t.row(s));
            }
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let idx = Arc::new(idx.iter().map(|&i| Some(i)).collect());
        self.gather_rows_opt(a, idx)
    }

    /// Output row `idx[i]` accumulates row `i` of `a`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<Vec<usize>>, out_rows: usize) -> Var {
        let t = self.value(a);
        assert_eq!(idx.len(), t.rows());
        let mut out = Tensor::zeros(out_rows, t.cols());
        for (i, &dst) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(dst).iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAddRows(a, idx))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        self.push(Tensor::from_vec(t.rows(), 1, data), Op::RowSum(a))
    }

    /// Scales row `r` of `a` by `s[r, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let ta = self.value(a);
        let ts = self.value(s);
        assert_eq!(ts.shape(), (ta.rows(), 1), "mul_col expects an Nx1 scale");
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let f = ts.get(r, 0);
            for o in out.row_mut(r) {
                *o *= f;
            }
        }
        self.push(out, Op::MulCol(a, s))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let tg = self.value(gamma);
        let tb = self.value(beta);
        let (rows, cols) = tx.shape();
        assert_eq!(tg.shape(), (1, cols));
        assert_eq!(tb.shape(), (1, cols));
        let mut xhat = Tensor::zeros(rows, cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * tg.data()[c] + tb.data()[c]);
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `q` is `(batch*lq) x d`, `k` and `v` are `(batch*lk) x d`, rows
    /// batch-major. `key_mask[b*lk + j] == false` hides key `j` of batch `b`;
    /// with `causal`, query `i` sees keys `j <= i` only. A query with no
    /// visible key produces zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Var {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        assert_eq!(d, dk);
        assert_eq!(self.shape(v), (kr, d));
        assert!(batch > 0 && qr % batch == 0 && kr % batch == 0, "attention batch mismatch");
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let lq = qr / batch;
        let lk = kr / batch;
        if let Some(m) = key_mask {
            assert_eq!(m.len(), batch * lk);
        }
        if causal {
            assert_eq!(lq, lk, "causal attention needs equal query/key lengths");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = self.value(q);
        let tk = self.value(k);
        let tv = self.value(v);
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = Tensor::zeros(qr, d);
        let mut scores = vec![0.0; lk];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let qi = &tq.row(b * lq + i)[h * dh..(h + 1) * dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        let visible = key_mask.is_none_or(|m| m[b * lk + j]) && (!causal || j <= i);
                        scores[j] = if visible {
                            let kj = &tk.row(b * lk + j)[h * dh..(h + 1) * dh];
                            let s = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                            max = max.max(s);
                            s
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let base = ((b * heads + h) * lq + i) * lk;
                    let mut z = 0.0;
                    for j in 0..lk {
                        if scores[j] != f64::NEG_INFINITY {
                            let e = (scores[j] - max).exp();
                            probs[base + j] = e;
                            z += e;
                        }
                    }
                    let orow = &mut out.row_mut(b * lq + i)[h * dh..(h + 1) * dh];
                    for j in 0..lk {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vj = &tv.row(b * lk + j)[h * dh..(h + 1) * dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let saved = AttentionSaved { q, k, v, batch, lq, lk, heads, probs };
        self.push(out, Op::Attention(Box::new(saved)))
    }

    /// Per-head dot product: `x` is `n x (heads*d)`, `a` is `heads x d`,
    /// output `n x heads`.
    pub fn head_dot(&mut self, x: Var, a: Var, heads: usize) -> Var {
        let tx = self.value(x);
        let ta = self.value(a);
        let d = ta.cols();
        assert_eq!(ta.rows(), heads);
        assert_eq!(tx.cols(), heads * d);
        let mut out = Tensor::zeros(tx.rows(), heads);
        for n in 0..tx.rows() {
            for h in 0..heads {
                let s = tx.row(n)[h * d..(h + 1) * d].iter().zip(ta.row(h)).map(|(p, q)| p * q).sum();
                out.set(n, h, s);
            }
        }
        self.push(out, Op::HeadDot { x, a, heads })
    }

    /// Mean over `heads` contiguous column blocks.
    pub fn head_mean(&mut self, x: Var, heads: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.cols() % heads, 0);
        let d = tx.cols() / heads;
        let mut out = Tensor::zeros(tx.rows(), d);
        for n in 0..tx.rows() {
            let row = tx.row(n);
            let orow = out.row_mut(n);
            for h in 0..heads {
                for c in 0..d {
                    orow[c] += row[h * d + c];
                }
            }
            for o in orow {
                *o /= heads as f64;
            }
        }
        self.push(out, Op::HeadMean { x, heads })
    }

    /// Graph-attention aggregation of source nodes into their groups.
    ///
    /// `src` (`n x heads`) and `dst` (`groups x heads`) are the source and
    /// target halves of the attention logit; `z` (`n x heads*d`) holds the
    /// projected source features and `seg[j]` the group of source `j`. Per
    /// group and head, logits pass a leaky ReLU and a softmax over that
    /// group's sources; a group without sources yields zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_attention(
        &mut self,
        src: Var,
        dst: Var,
        z: Var,
        seg: Arc<Vec<usize>>,
        groups: usize,
        heads: usize,
        slope: f64,
    ) -> Var {
        let ts = self.value(src);
        let td = self.value(dst);
        let tz = self.value(z);
        let n = ts.rows();
        assert_eq!(ts.cols(), heads);
        assert_eq!(td.shape(), (groups, heads));
        assert_eq!(tz.rows(), n);
        assert_eq!(seg.len(), n);
        assert_eq!(tz.cols() % heads, 0);
        let d = tz.cols() / heads;
        let members = group_members(&seg, groups);
        let mut alpha = vec![0.0; n * heads];
        let mut positive = vec![false; n * heads];
        let mut out = Tensor::zeros(groups, heads * d);
        for (g, nodes) in members.iter().enumerate() {
            if nodes.is_empty() {
                continue;
            }
            for h in 0..heads {
                let mut max = f64::NEG_INFINITY;
                for &j in nodes {
                    let pre = ts.get(j, h) + td.get(g, h);
                    positive[j * heads + h] = pre > 0.0;
                    let e = if pre > 0.0 { pre } else { slope * pre };
                    alpha[j * heads + h] = e;
                    max = max.max(e);
                }
                let mut sum = 0.0;
                for &j in nodes {
                    let e = (alpha[j * heads + h] - max).exp();
                    alpha[j * heads + h] = e;
                    sum += e;
                }
                let orow = &mut out.row_mut(g)[h * d..(h + 1) * d];
                for &j in nodes {
                    let a = alpha[j * heads + h] / sum;
                    alpha[j * heads + h] = a;
                    for (o, x) in orow.iter_mut().zip(&tz.row(j)[h * d..(h + 1) * d]) {
                        *o += a * x;
                    }
                }
            }
        }
        let saved = SegmentSaved { src, dst, z, seg, groups, heads, slope, alpha, positive };
        self.push(out, Op::SegmentAttention(Box::new(saved)))
    }

    /// Attention weights computed by a `segment_attention` node, laid out
    /// `[source * heads + head]`.
    pub fn segment_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::SegmentAttention(s) => Some(&s.alpha),
            _ => None,
        }
    }

    /// Row softmax over entries whose mask bit is set; masked entries and
    /// fully masked rows are zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        assert_eq!(mask.len(), rows * cols);
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let m = &mask[r * cols..(r + 1) * cols];
            let max = tx.row(r).iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for c in 0..cols {
                if m[c] {
                    let e = (tx.get(r, c) - max).exp();
                    out.set(r, c, e);
                    z += e;
                }
            }
            for o in out.row_mut(r) {
                *o /= z;
            }
        }
        self.push(out, Op::MaskedSoftmax { x, mask })
    }

    /// Per-row negative log-density of `target` under a diagonal Gaussian
    /// mixture with `k` components of dimension `dim`.
    ///
    /// `logits` is `n x k` (softmax gives the weights), `means` and
    /// `log_vars` are `n x (k*dim)` component-major. Evaluated with
    /// log-sum-exp; output is `n x 1`.
    pub fn gmm_nll(&mut self, logits: Var, means: Var, log_vars: Var, target: Var) -> Var {
        let tl = self.value(logits);
        let tm = self.value(means);
        let tv = self.value(log_vars);
        let tt = self.value(target);
        let (n, k) = tl.shape();
        let dim = tt.cols();
        assert_eq!(tt.rows(), n);
        assert_eq!(tm.shape(), (n, k * dim), "gmm means shape");
        assert_eq!(tv.shape(), (n, k * dim), "gmm log-variance shape");
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut resp = vec![0.0; n * k];
        let mut weights = vec![0.0; n * k];
        let mut out = Tensor::zeros(n, 1);
        let mut comp = vec![0.0; k];
        for r in 0..n {
            let lrow = tl.row(r);
            let lmax = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse_w = lmax + lrow.iter().map(|l| (l - lmax).exp()).sum::<f64>().ln();
            for c in 0..k {
                let log_w = lrow[c] - lse_w;
                weights[r * k + c] = log_w.exp();
                let mut ln = 0.0;
                for e in 0..dim {
                    let mu = tm.get(r, c * dim + e);
                    let lv = tv.get(r, c * dim + e);
                    let diff = tt.get(r, e) - mu;
                    ln += -0.5 * (ln_2pi + lv + diff * diff * (-lv).exp());
                }
                comp[c] = log_w + ln;
            }
            let cmax = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lp = cmax + comp.iter().map(|v| (v - cmax).exp()).sum::<f64>().ln();
            for c in 0..k {
                resp[r * k + c] = (comp[c] - lp).exp();
            }
            out.set(r, 0, -lp);
        }
        let saved = GmmSaved { logits, means, log_vars, target, k, dim, resp, weights };
        self.push(out, Op::GmmNll(Box::new(saved)))
    }

    /// Per-row `KL(q || p)` between diagonal Gaussians given means and
    /// log-variances; output `n x 1`.
    pub fn kl_diag(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Var {
        let (tmq, tlq, tmp, tlp) = (self.value(mq), self.value(lq), self.value(mp), self.value(lp));
        let (n, d) = tmq.shape();
        for t in [tlq, tmp, tlp] {
            assert_eq!(t.shape(), (n, d), "kl shape mismatch");
        }
        let mut out = Tensor::zeros(n, 1);
        for r in 0..n {
            let mut s = 0.0;
            for c in 0..d {
                let diff = tmq.get(r, c) - tmp.get(r, c);
                let (a, b) = (tlq.get(r, c), tlp.get(r, c));
                s += 0.5 * (b - a + (a.exp() + diff * diff) * (-b).exp() - 1.0);
            }
            out.set(r, 0, s);
        }
        self.push(out, Op::KlDiag { mq, lq, mp, lp })
    }

    /// First convolution over one-hot class maps, evaluated as a table
    /// lookup. `classes` holds `batch` maps of `height x width` class ids;
    /// `w` is `c_out x (n_classes*9)`, `b` is `1 x c_out`. Output rows are
    /// per-sample `c_out*height*width`, channel-major, zero padding.
    pub fn onehot_conv3x3(
        &mut self,
        classes: Arc<Vec<u8>>,
        n_classes: usize,
        height: usize,
        width: usize,
        w: Var,
        b: Var,
    ) -> Var {
        let tw = self.value(w);
        let tb = self.value(b);
        let c_out = tw.rows();
        assert_eq!(tw.cols(), n_classes * 9);
        assert_eq!(tb.shape(), (1, c_out));
        let hw = height * width;
        assert_eq!(classes.len() % hw, 0);
        let batch = classes.len() / hw;
        let mut out = Tensor::zeros(batch, c_out * hw);
        for s in 0..batch {
            let cls = &classes[s * hw..(s + 1) * hw];
            let orow = out.row_mut(s);
            for co in 0..c_out {
                let wrow = tw.row(co);
                let bias = tb.data()[co];
                for y in 0..height {
                    for x in 0..width {
                        let mut acc = bias;
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= height as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let xx = x as isize + kx as isize - 1;
                                if xx < 0 || xx >= width as isize {
                                    continue;
                                }
                                let c = cls[yy as usize * width + xx as usize] as usize;
                                acc += wrow[c * 9 + ky * 3 + kx];
                            }
                        }
                        orow[co * hw + y * width + x] = acc;
                    }
                }
            }
        }
        self.push(out, Op::OnehotConv { w, b, classes, n_classes, height, width })
    }

    /// 3x3 same-padding convolution. `x` rows are per-sample
    /// `c_in*height*width`; `w` is `c_out x (c_in*9)`; `b` is `1 x c_out`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, c_in: usize, height: usize, width: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        let c_out = tw.rows();
        let hw = height * width;
        assert_eq!(tx.cols(), c_in * hw, "conv input shape");
        assert_eq!(tw.cols(), c_in * 9, "conv weight shape");
        assert_eq!(tb.shape(), (1, c_out));
        let batch = tx.rows();
        let mut out = Tensor::zeros(batch, c_out * hw);
        let mut col = vec![0.0; c_in * 9 * hw];
        for s in 0..batch {
            im2col(tx.row(s), c_in, height, width, &mut col);
            let orow = out.row_mut(s);
            for co in 0..c_out {
                orow[co * hw..(co + 1) * hw].fill(tb.data()[co]);
            }
            gemm(tw.data(), false, &col, false, orow, c_out, c_in * 9, hw, 1.0);
        }
        self.push(out, Op::Conv3x3 { x, w, b, c_in, height, width })
    }

    /// 2x2 average pooling with stride 2 on channel-major feature maps.
    pub fn avg_pool2(&mut self, x: Var, channels: usize, height: usize, width: usize) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.cols(), channels * height * width);
        assert!(height % 2 == 0 && width % 2 == 0);
        let (oh, ow) = (height / 2, width / 2);
        let mut out = Tensor::zeros(tx.rows(), channels * oh * ow);
        for s in 0..tx.rows() {
            let row = tx.row(s);
            let orow = out.row_mut(s);
            for c in 0..channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let base = c * height * width;
                        let v = row[base + 2 * y * width + 2 * x]
                            + row[base + 2 * y * width + 2 * x + 1]
                            + row[base + (2 * y + 1) * width + 2 * x]
                            + row[base + (2 * y + 1) * width + 2 * x + 1];
                        orow[c * oh * ow + y * ow + x] = 0.25 * v;
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2 { x, channels, height, width })
    }

    /// Side of every kink taken by the piecewise-linear ops (rectifiers,
    /// clamps, attention-logit leaky ReLUs). Two evaluations with equal
    /// patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => out.extend(self.value(*a).data().iter().map(|&x| x > 0.0)),
                Op::Clamp(a, lo, hi) => {
                    for &x in self.value(*a).data() {
                        out.push(x < *lo);
                        out.push(x > *hi);
                    }
                }
                Op::SegmentAttention(s) => out.extend_from_slice(&s.positive),
                _ => {}
            }
        }
        out
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut stash: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf | Op::Param) {
                stash[i] = Some(g);
            }
        }
        Gradients { grads: stash }
    }

    /// Gradient for every parameter that participated in the graph.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> =
            self.params.iter().filter_map(|(&id, &v)| grads.wrt(v).map(|g| (id, g.clone()))).collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = ta.shape();
                let n = tb.cols();
                let mut ga = Tensor::zeros(m, k);
                gemm(g.data(), false, tb.data(), true, ga.data_mut(), m, n, k, 0.0);
                let mut gb = Tensor::zeros(k, n);
                gemm(ta.data(), true, g.data(), false, gb.data_mut(), k, m, n, 0.0);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let ga = zip(g, val(*b), |x, y| x * y);
                let gb = zip(g, val(*a), |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddBias(a, b) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::Relu(a) => accumulate(grads, *a, zip(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Elu(a) => {
                let ga = zip(g, val(*a), |x, y| if y > 0.0 { x } else { x * y.exp() });
                accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, s) => {
                accumulate(grads, *a, zip(g, val(*a), |x, y| if y > 0.0 { x } else { s * x }));
            }
            Op::Tanh(a) => accumulate(grads, *a, zip(g, out, |x, y| x * (1.0 - y * y))),
            Op::Exp(a) => accumulate(grads, *a, zip(g, out, |x, y| x * y)),
            Op::Clamp(a, lo, hi) => {
                let ga = zip(g, val(*a), |x, y| if y > *lo && y < *hi { x } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    off += c;
                    accumulate(grads, p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                    off += r;
                    accumulate(grads, p, gp);
                }
            }
            Op::GatherRows(a, idx) => {
                let ta = val(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for (i, src) in idx.iter().enumerate() {
                    if let Some(s) = *src {
                        for (o, x) in ga.row_mut(s).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let cols = g.cols();
                let mut ga = Tensor::zeros(idx.len(), cols);
                for (i, &dst) in idx.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(dst));
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).fill(g.get(row, 0));
                }
                accumulate(grads, *a, ga);
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let mut ga = g.clone();
                let mut gs = Tensor::zeros(ta.rows(), 1);
                for r in 0..ta.rows() {
                    let f = ts.get(r, 0);
                    let dot: f64 = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                    gs.set(r, 0, dot);
                    for o in ga.row_mut(r) {
                        *o *= f;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *s, gs);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let tg = val(*gamma);
                let (rows, cols) = xhat.shape();
                let mut gx = Tensor::zeros(rows, cols);
                let mut gg = Tensor::zeros(1, cols);
                let mut gb = Tensor::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    for c in 0..cols {
                        gg.data_mut()[c] += gr[c] * hr[c];
                        gb.data_mut()[c] += gr[c];
                        dxhat[c] = gr[c] * tg.data()[c];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let row = gx.row_mut(r);
                    for c in 0..cols {
                        row[c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gb);
            }
            Op::Attention(s) => self.backprop_attention(s, g, grads),
            Op::HeadDot { x, a, heads } => {
                let (tx, ta) = (val(*x), val(*a));
                let d = ta.cols();
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                let mut ga = Tensor::zeros(ta.rows(), d);
                for n in 0..tx.rows() {
                    for h in 0..*heads {
                        let gh = g.get(n, h);
                        if gh == 0.0 {
                            continue;
                        }
                        let xr = &tx.row(n)[h * d..(h + 1) * d];
                        for c in 0..d {
                            gx.row_mut(n)[h * d + c] = gh * ta.get(h, c);
                            ga.row_mut(h)[c] += gh * xr[c];
                        }
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *a, ga);
            }
            Op::HeadMean { x, heads } => {
                let tx = val(*x);
                let d = g.cols();
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                let inv = 1.0 / *heads as f64;
                for n in 0..tx.rows() {
                    for h in 0..*heads {
                        for c in 0..d {
                            gx.row_mut(n)[h * d + c] = g.get(n, c) * inv;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::SegmentAttention(s) => self.backprop_segment(s, g, grads),
            Op::MaskedSoftmax { x, mask } => {
                let (rows, cols) = out.shape();
                let mut gx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let dot: f64 = g.row(r).iter().zip(out.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        if mask[r * cols + c] {
                            gx.set(r, c, out.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::GmmNll(s) => {
                let tm = val(s.means);
                let tv = val(s.log_vars);
                let tt = val(s.target);
                let (k, dim) = (s.k, s.dim);
                let n = tt.rows();
                let mut gl = Tensor::zeros(n, k);
                let mut gm = Tensor::zeros(n, k * dim);
                let mut gv = Tensor::zeros(n, k * dim);
                let mut gt = Tensor::zeros(n, dim);
                for r in 0..n {
                    let go = g.get(r, 0);
                    for c in 0..k {
                        let rc = s.resp[r * k + c];
                        gl.set(r, c, go * (s.weights[r * k + c] - rc));
                        for e in 0..dim {
                            let mu = tm.get(r, c * dim + e);
                            let lv = tv.get(r, c * dim + e);
                            let diff = tt.get(r, e) - mu;
                            let prec = (-lv).exp();
                            gm.set(r, c * dim + e, -go * rc * diff * prec);
                            gv.set(r, c * dim + e, go * rc * 0.5 * (1.0 - diff * diff * prec));
                            gt.row_mut(r)[e] += go * rc * diff * prec;
                        }
                    }
                }
                accumulate(grads, s.logits, gl);
                accumulate(grads, s.means, gm);
                accumulate(grads, s.log_vars, gv);
                accumulate(grads, s.target, gt);
            }
            Op::KlDiag { mq, lq, mp, lp } => {
                let (tmq, tlq, tmp, tlp) = (val(*mq), val(*lq), val(*mp), val(*lp));
                let (n, d) = tmq.shape();
                let mut gmq = Tensor::zeros(n, d);
                let mut glq = Tensor::zeros(n, d);
                let mut gmp = Tensor::zeros(n, d);
                let mut glp = Tensor::zeros(n, d);
                for r in 0..n {
                    let go = g.get(r, 0);
                    for c in 0..d {
                        let diff = tmq.get(r, c) - tmp.get(r, c);
                        let (a, b) = (tlq.get(r, c), tlp.get(r, c));
                        let inv_p = (-b).exp();
                        gmq.set(r, c, go * diff * inv_p);
                        gmp.set(r, c, -go * diff * inv_p);
                        glq.set(r, c, go * 0.5 * (a.exp() * inv_p - 1.0));
                        glp.set(r, c, go * 0.5 * (1.0 - (a.exp() + diff * diff) * inv_p));
                    }
                }
                accumulate(grads, *mq, gmq);
                accumulate(grads, *lq, glq);
                accumulate(grads, *mp, gmp);
                accumulate(grads, *lp, glp);
            }
            Op::OnehotConv { w, b, classes, n_classes, height, width } => {
                let tw = val(*w);
                let c_out = tw.rows();
                let hw = height * width;
                let mut gw = Tensor::zeros(c_out, n_classes * 9);
                let mut gb = Tensor::zeros(1, c_out);
                for s in 0..g.rows() {
                    let cls = &classes[s * hw..(s + 1) * hw];
                    let grow = g.row(s);
                    for co in 0..c_out {
                        let gwrow = gw.row_mut(co);
                        let mut bsum = 0.0;
                        for y in 0..*height {
                            for x in 0..*width {
                                let go = grow[co * hw + y * width + x];
                                bsum += go;
                                for ky in 0..3 {
                                    let yy = y as isize + ky as isize - 1;
                                    if yy < 0 || yy >= *height as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let xx = x as isize + kx as isize - 1;
                                        if xx < 0 || xx >= *width as isize {
                                            continue;
                                        }
                                        let c = cls[yy as usize * width + xx as usize] as usize;
                                        gwrow[c * 9 + ky * 3 + kx] += go;
                                    }
                                }
                            }
                        }
                        gb.data_mut()[co] += bsum;
                    }
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::Conv3x3 { x, w, b, c_in, height, width } => {
                let (tx, tw) = (val(*x), val(*w));
                let c_out = tw.rows();
                let hw = height * width;
                let k = c_in * 9;
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                let mut gw = Tensor::zeros(c_out, k);
                let mut gb = Tensor::zeros(1, c_out);
                let mut col = vec![0.0; k * hw];
                let mut gcol = vec![0.0; k * hw];
                for s in 0..tx.rows() {
                    let grow = g.row(s);
                    im2col(tx.row(s), *c_in, *height, *width, &mut col);
                    gemm(grow, false, &col, true, gw.data_mut(), c_out, hw, k, 1.0);
                    gemm(tw.data(), true, grow, false, &mut gcol, k, c_out, hw, 0.0);
                    col2im(&gcol, *c_in, *height, *width, gx.row_mut(s));
                    for co in 0..c_out {
                        gb.data_mut()[co] += grow[co * hw..(co + 1) * hw].iter().sum::<f64>();
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::AvgPool2 { x, channels, height, width } => {
                let tx = val(*x);
                let (oh, ow) = (height / 2, width / 2);
                let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                for s in 0..tx.rows() {
                    let grow = g.row(s);
                    let row = gx.row_mut(s);
                    for c in 0..*channels {
                        let base = c * height * width;
                        for y in 0..oh {
                            for xo in 0..ow {
                                let v = 0.25 * grow[c * oh * ow + y * ow + xo];
                                row[base + 2 * y * width + 2 * xo] += v;
                                row[base + 2 * y * width + 2 * xo + 1] += v;
                                row[base + (2 * y + 1) * width + 2 * xo] += v;
                                row[base + (2 * y + 1) * width + 2 * xo + 1] += v;
                            }
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }

    fn backprop_attention(&self, s: &AttentionSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tq = self.value(s.q);
        let tk = self.value(s.k);
        let tv = self.value(s.v);
        let d = tq.cols();
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(tq.rows(), d);
        let mut gk = Tensor::zeros(tk.rows(), d);
        let mut gv = Tensor::zeros(tv.rows(), d);
        let mut dp = vec![0.0; s.lk];
        for b in 0..s.batch {
            for h in 0..s.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.lq {
                    let base = ((b * s.heads + h) * s.lq + i) * s.lk;
                    let p = &s.probs[base..base + s.lk];
                    let go = &g.row(b * s.lq + i)[cols.clone()];
                    let mut dot = 0.0;
                    for j in 0..s.lk {
                        if p[j] == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vj = &tv.row(b * s.lk + j)[cols.clone()];
                        dp[j] = go.iter().zip(vj).map(|(a, c)| a * c).sum();
                        dot += p[j] * dp[j];
                        for (o, x) in gv.row_mut(b * s.lk + j)[cols.clone()].iter_mut().zip(go) {
                            *o += p[j] * x;
                        }
                    }
                    let qi: Vec<f64> = tq.row(b * s.lq + i)[cols.clone()].to_vec();
                    for j in 0..s.lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj = &tk.row(b * s.lk + j)[cols.clone()];
                        for (o, x) in gq.row_mut(b * s.lq + i)[cols.clone()].iter_mut().zip(kj) {
                            *o += ds * x;
                        }
                        for (o, x) in gk.row_mut(b * s.lk + j)[cols.clone()].iter_mut().zip(&qi) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        accumulate(grads, s.q, gq);
        accumulate(grads, s.k, gk);
        accumulate(grads, s.v, gv);
    }

    fn backprop_segment(&self, s: &SegmentSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let tz = self.value(s.z);
        let heads = s.heads;
        let d = tz.cols() / heads;
        let n = tz.rows();
        let members = group_members(&s.seg, s.groups);
        let mut gz = Tensor::zeros(n, tz.cols());
        let mut gsrc = Tensor::zeros(n, heads);
        let mut gdst = Tensor::zeros(s.groups, heads);
        let mut dalpha = vec![0.0; n * heads];
        for (grp, nodes) in members.iter().enumerate() {
            for h in 0..heads {
                let go = &g.row(grp)[h * d..(h + 1) * d];
                let mut dot = 0.0;
                for &j in nodes {
                    let a = s.alpha[j * heads + h];
                    let zj = &tz.row(j)[h * d..(h + 1) * d];
                    let da: f64 = go.iter().zip(zj).map(|(x, y)| x * y).sum();
                    dalpha[j * heads + h] = da;
                    dot += a * da;
                    for (o, x) in gz.row_mut(j)[h * d..(h + 1) * d].iter_mut().zip(go) {
                        *o += a * x;
                    }
                }
                for &j in nodes {
                    let a = s.alpha[j * heads + h];
                    let de = a * (dalpha[j * heads + h] - dot);
                    let dpre = if s.positive[j * heads + h] { de } else { s.slope * de };
                    gsrc.set(j, h, dpre);
                    gdst.row_mut(grp)[h] += dpre;
                }
            }
        }
        accumulate(grads, s.src, gsrc);
        accumulate(grads, s.dst, gdst);
        accumulate(grads, s.z, gz);
    }
}

fn group_members(seg: &[usize], groups: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); groups];
    for (j, &g) in seg.iter().enumerate() {
        members[g].push(j);
    }
    members
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn im2col(input: &[f64], c_in: usize, height: usize, width: usize, col: &mut [f64]) {
    let hw = height * width;
    for ci in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..height {
                    let yy = y as isize + ky as isize - 1;
                    for x in 0..width {
                        let xx = x as isize + kx as isize - 1;
                        row[y * width + x] = if yy < 0 || yy >= height as isize || xx < 0 || xx >= width as isize {
                            0.0
                        } else {
                            input[ci * hw + yy as usize * width + xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c_in: usize, height: usize, width: usize, out: &mut [f64]) {
    let hw = height * width;
    for ci in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..height {
                    let yy = y as isize + ky as isize - 1;
                    if yy < 0 || yy >= height as isize {
                        continue;
                    }
                    for x in 0..width {
                        let xx = x as isize + kx as isize - 1;
                        if xx < 0 || xx >= width as isize {
                            continue;
                        }
                        out[ci * hw + yy as usize * width + xx as usize] += row[y * width + x];
                    }
                }
            }
        }
    }
}
