//! A small tape-based reverse-mode differentiator over [`Matrix`] values.
//!
//! Each forward pass builds a fresh [`Tape`]. Leaves are either trainable
//! (gradients are accumulated) or constants. The fused attention ops carry
//! their own hand-derived backward passes; everything else is elementwise or
//! a matrix product.

use std::sync::Arc;

use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Elu,
    Relu,
    Tanh,
    Identity,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Neighborhood structure consumed by the graph-attention op.
///
/// For every target node `v`, `offsets[v]..offsets[v+1]` indexes the
/// incoming messages: `sources[e]` is the sending node and `edge_rows[e]`
/// optionally points into the edge-feature table (self loops carry none).
#[derive(Debug, Clone)]
pub struct AttentionAdjacency {
    pub offsets: Vec<usize>,
    pub sources: Vec<usize>,
    pub edge_rows: Vec<Option<usize>>,
    pub edge_features: Option<Arc<Matrix>>,
}

impl AttentionAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }
}

pub const ATTENTION_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScaled(Var, Var, f64),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Act(Var, Activation),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    LayerNorm {
        x: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    GraphAttention {
        z: Var,
        a_src: Var,
        a_dst: Var,
        adj: Arc<AttentionAdjacency>,
        heads: usize,
        pre: Vec<f64>,
        alpha: Vec<f64>,
        keep_scale: Option<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    CosineLoss {
        z: Var,
        target: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads[var.0].take()
    }
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Post-softmax coefficients of a graph-attention node, indexed
    /// `entry * heads + head`.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::GraphAttention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Copy of `a`'s value with no path back to `a`.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let r = r.data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "mul_row width mismatch");
        let r = r.data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `a + scale · b`
    pub fn add_scaled(&mut self, a: Var, b: Var, scale: f64) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(&self.value(b).scale(scale));
        let rg = self.rg(a) || (self.rg(b) && scale != 0.0);
        self.push(value, Op::AddScaled(a, b, scale), rg)
    }

    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let src = self.value(a);
        assert_eq!(src.shape(), mask.shape(), "mul_const shape mismatch");
        let data = src.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
        let value = Matrix::from_vec(src.rows(), src.cols(), data);
        let rg = self.rg(a);
        self.push(value, Op::MulConst(a, mask), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let value = self.value(a).map(|x| act.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Act(a, act), rg)
    }

    /// Row gather; indices may repeat (used for broadcasting and lookups).
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let value = self.value(a).select_rows(&idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.rows(), vb.rows(), "concat_cols row mismatch");
        let cols = va.cols() + vb.cols();
        let mut data = Vec::with_capacity(va.rows() * cols);
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Matrix::from_vec(va.rows(), cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let (n, d) = src.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(xhat.clone(), Op::LayerNorm { x, xhat, inv_std }, rg)
    }

    /// Multi-head scaled dot-product self-attention restricted to row
    /// segments `(start, len)`. Rows outside every segment get zero output.
    pub fn self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qm.shape();
        assert_eq!(km.shape(), (t, d));
        assert_eq!(vm.shape(), (t, d));
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, len) in &segments {
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &qm.row(start + i)[c0..c0 + dh];
                    let prow = p.row_mut(i);
                    let mut mx = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let s = dot(qi, &km.row(start + j)[c0..c0 + dh]) * scale;
                        *pj = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= z;
                    }
                    let orow = &mut out.row_mut(start + i)[c0..c0 + dh];
                    for (j, &pij) in p.row(i).iter().enumerate() {
                        let vj = &vm.row(start + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::SelfAttention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Additive graph attention with head averaging.
    ///
    /// `z` holds the transformed node states, `heads` blocks of width `d`
    /// side by side. `a_src`/`a_dst` are `heads × d`. The message from `u`
    /// to `v` is `z_u ⊙ x_e` when an edge feature exists, else `z_u`.
    /// `keep_scale`, if given, multiplies each attention coefficient
    /// (indexed `edge * heads + head`) after the softmax.
    pub fn graph_attention(
        &mut self,
        z: Var,
        a_src: Var,
        a_dst: Var,
        adj: Arc<AttentionAdjacency>,
        heads: usize,
        keep_scale: Option<Vec<f64>>,
    ) -> Var {
        let zm = self.value(z);
        let n = adj.num_nodes();
        assert_eq!(zm.rows(), n, "graph attention row mismatch");
        assert_eq!(zm.cols() % heads, 0);
        let d = zm.cols() / heads;
        let (asrc, adst) = (self.value(a_src), self.value(a_dst));
        assert_eq!(asrc.shape(), (heads, d));
        assert_eq!(adst.shape(), (heads, d));
        let num_e = adj.sources.len();
        if let Some(ks) = &keep_scale {
            assert_eq!(ks.len(), num_e * heads);
        }
        let mut s = vec![0.0; n * heads];
        let mut t = vec![0.0; n * heads];
        for u in 0..n {
            for h in 0..heads {
                let zu = &zm.row(u)[h * d..(h + 1) * d];
                s[u * heads + h] = dot(asrc.row(h), zu);
                t[u * heads + h] = dot(adst.row(h), zu);
            }
        }
        let mut pre = vec![0.0; num_e * heads];
        let mut alpha = vec![0.0; num_e * heads];
        let mut out = Matrix::zeros(n, d);
        let inv_h = 1.0 / heads as f64;
        for v in 0..n {
            let (lo, hi) = (adj.offsets[v], adj.offsets[v + 1]);
            if lo == hi {
                continue;
            }
            for h in 0..heads {
                let mut mx = f64::NEG_INFINITY;
                for e in lo..hi {
                    let p = t[v * heads + h] + s[adj.sources[e] * heads + h];
                    pre[e * heads + h] = p;
                    let l = leaky(p);
                    alpha[e * heads + h] = l;
                    mx = mx.max(l);
                }
                let mut zsum = 0.0;
                for e in lo..hi {
                    let w = (alpha[e * heads + h] - mx).exp();
                    alpha[e * heads + h] = w;
                    zsum += w;
                }
                for e in lo..hi {
                    alpha[e * heads + h] /= zsum;
                }
                let orow = out.row_mut(v);
                for e in lo..hi {
                    let mut a = alpha[e * heads + h];
                    if let Some(ks) = &keep_scale {
                        a *= ks[e * heads + h];
                    }
                    let zu = &zm.row(adj.sources[e])[h * d..(h + 1) * d];
                    let coef = a * inv_h;
                    match edge_row(&adj, e) {
                        Some(x) => {
                            for ((o, zv), xv) in orow.iter_mut().zip(zu).zip(x) {
                                *o += coef * zv * xv;
                            }
                        }
                        None => {
                            for (o, zv) in orow.iter_mut().zip(zu) {
                                *o += coef * zv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(z) || self.rg(a_src) || self.rg(a_dst);
        self.push(
            out,
            Op::GraphAttention {
                z,
                a_src,
                a_dst,
                adj,
                heads,
                pre,
                alpha,
                keep_scale,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    /// An empty row set yields a zero scalar.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "cross_entropy target mismatch");
        let m = lm.rows();
        let mut probs = Matrix::zeros(m, lm.cols());
        let mut total = 0.0;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = lm.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[tgt];
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let value = if m == 0 { 0.0 } else { total / m as f64 };
        let rg = self.rg(logits) && m > 0;
        self.push(
            Matrix::scalar(value),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of `1 - cos(z_i, target_i)`; a zero-norm row on
    /// either side counts as cosine 0 and passes no gradient.
    pub fn cosine_loss(&mut self, z: Var, target: Matrix) -> Var {
        let zm = self.value(z);
        assert_eq!(zm.shape(), target.shape(), "cosine_loss shape mismatch");
        let n = zm.rows();
        let mut total = 0.0;
        for i in 0..n {
            let c = crate::tensor::cosine(zm.row(i), target.row(i)).unwrap_or(0.0);
            total += 1.0 - c;
        }
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        let rg = self.rg(z) && n > 0;
        self.push(Matrix::scalar(value), Op::CosineLoss { z, target }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        if self.rg(loss) {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = g.matmul_bt(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = self.value(*a).matmul_at(&g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if self.rg(*a) {
                        let ga = g.matmul(self.value(*b));
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let gb = g.matmul_at(self.value(*a));
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, g.sum_rows());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let r = self.value(*row);
                    if self.rg(*row) {
                        let x = self.value(*a);
                        let mut gr = Matrix::zeros(1, r.cols());
                        for i in 0..x.rows() {
                            for ((o, gv), xv) in gr.row_mut(0).iter_mut().zip(g.row(i)).zip(x.row(i)) {
                                *o += gv * xv;
                            }
                        }
                        accumulate(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        let mut ga = g;
                        for i in 0..ga.rows() {
                            for (o, rv) in ga.row_mut(i).iter_mut().zip(r.row(0)) {
                                *o *= rv;
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::AddScaled(a, b, s) => {
                    if self.rg(*b) && *s != 0.0 {
                        accumulate(&mut grads, *b, g.scale(*s));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::MulConst(a, mask) => {
                    if self.rg(*a) {
                        let data = g.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
                        accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                    }
                }
                Op::Scale(a, s) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.scale(*s));
                    }
                }
                Op::Act(a, act) => {
                    if self.rg(*a) {
                        let x = self.value(*a);
                        let data = g
                            .data()
                            .iter()
                            .zip(x.data())
                            .map(|(gv, xv)| gv * act.derivative(*xv))
                            .collect();
                        accumulate(&mut grads, *a, Matrix::from_vec(g.rows(), g.cols(), data));
                    }
                }
                Op::GatherRows(a, idx) => {
                    if self.rg(*a) {
                        let src = self.value(*a);
                        let mut ga = Matrix::zeros(src.rows(), src.cols());
                        for (r, &i) in idx.iter().enumerate() {
                            for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if self.rg(*a) {
                        let mut ga = Matrix::zeros(g.rows(), ca);
                        for r in 0..g.rows() {
                            ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Matrix::zeros(g.rows(), cb);
                        for r in 0..g.rows() {
                            gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    if self.rg(*x) {
                        let (n, d) = xhat.shape();
                        let mut gx = Matrix::zeros(n, d);
                        let df = d as f64;
                        for r in 0..n {
                            let gy = g.row(r);
                            let xh = xhat.row(r);
                            let sum_g: f64 = gy.iter().sum();
                            let sum_gx = dot(gy, xh);
                            let is = inv_std[r];
                            for ((o, gv), xv) in gx.row_mut(r).iter_mut().zip(gy).zip(xh) {
                                *o = is / df * (df * gv - sum_g - xv * sum_gx);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SelfAttention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self_attention_backward(self, &g, *q, *k, *v, segments, *heads, probs);
                    if self.rg(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
                Op::GraphAttention {
                    z,
                    a_src,
                    a_dst,
                    adj,
                    heads,
                    pre,
                    alpha,
                    keep_scale,
                } => {
                    let (gz, gs, gd) = graph_attention_backward(
                        self,
                        &g,
                        *z,
                        *a_src,
                        *a_dst,
                        adj,
                        *heads,
                        pre,
                        alpha,
                        keep_scale.as_deref(),
                    );
                    if self.rg(*z) {
                        accumulate(&mut grads, *z, gz);
                    }
                    if self.rg(*a_src) {
                        accumulate(&mut grads, *a_src, gs);
                    }
                    if self.rg(*a_dst) {
                        accumulate(&mut grads, *a_dst, gd);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    if self.rg(*logits) && !targets.is_empty() {
                        let up = g.to_scalar() / targets.len() as f64;
                        let mut gl = probs.clone();
                        for (r, &t) in targets.iter().enumerate() {
                            let row = gl.row_mut(r);
                            row[t] -= 1.0;
                            for x in row.iter_mut() {
                                *x *= up;
                            }
                        }
                        accumulate(&mut grads, *logits, gl);
                    }
                }
                Op::CosineLoss { z, target } => {
                    if self.rg(*z) {
                        let zm = self.value(*z);
                        let n = zm.rows();
                        let up = g.to_scalar() / n as f64;
                        let mut gz = Matrix::zeros(n, zm.cols());
                        for i in 0..n {
                            let (zi, ti) = (zm.row(i), target.row(i));
                            let nz = dot(zi, zi).sqrt();
                            let nt = dot(ti, ti).sqrt();
                            if nz == 0.0 || nt == 0.0 {
                                continue;
                            }
                            let c = dot(zi, ti) / (nz * nt);
                            for ((o, zv), tv) in gz.row_mut(i).iter_mut().zip(zi).zip(ti) {
                                *o = -up * (tv / (nz * nt) - c * zv / (nz * nz));
                            }
                        }
                        accumulate(&mut grads, *z, gz);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[inline]
fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        ATTENTION_LEAKY_SLOPE * x
    }
}

#[inline]
fn edge_row(adj: &AttentionAdjacency, e: usize) -> Option<&[f64]> {
    match (adj.edge_rows[e], adj.edge_features.as_deref()) {
        (Some(r), Some(table)) => Some(table.row(r)),
        _ => None,
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[allow(clippy::too_many_arguments)]
fn self_attention_backward(
    tape: &Tape,
    g: &Matrix,
    q: Var,
    k: Var,
    v: Var,
    segments: &[(usize, usize)],
    heads: usize,
    probs: &[Matrix],
) -> (Matrix, Matrix, Matrix) {
    let (qm, km, vm) = (tape.value(q), tape.value(k), tape.value(v));
    let (t, d) = qm.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Matrix::zeros(t, d);
    let mut gk = Matrix::zeros(t, d);
    let mut gv = Matrix::zeros(t, d);
    let mut pi = 0;
    for &(start, len) in segments {
        for h in 0..heads {
            let p = &probs[pi];
            pi += 1;
            let c0 = h * dh;
            let mut dp = vec![0.0; len];
            for i in 0..len {
                let gi = &g.row(start + i)[c0..c0 + dh];
                let prow = p.row(i);
                for j in 0..len {
                    dp[j] = dot(gi, &vm.row(start + j)[c0..c0 + dh]);
                    let gvj = &mut gv.row_mut(start + j)[c0..c0 + dh];
                    for (o, x) in gvj.iter_mut().zip(gi) {
                        *o += prow[j] * x;
                    }
                }
                let inner = dot(prow, &dp);
                for j in 0..len {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &km.row(start + j)[c0..c0 + dh];
                    let gqi = &mut gq.row_mut(start + i)[c0..c0 + dh];
                    for (o, x) in gqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let qi = &qm.row(start + i)[c0..c0 + dh];
                    let gkj = &mut gk.row_mut(start + j)[c0..c0 + dh];
                    for (o, x) in gkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
    }
    (gq, gk, gv)
}

#[allow(clippy::too_many_arguments)]
fn graph_attention_backward(
    tape: &Tape,
    g: &Matrix,
    z: Var,
    a_src: Var,
    a_dst: Var,
    adj: &AttentionAdjacency,
    heads: usize,
    pre: &[f64],
    alpha: &[f64],
    keep_scale: Option<&[f64]>,
) -> (Matrix, Matrix, Matrix) {
    let zm = tape.value(z);
    let (asrc, adst) = (tape.value(a_src), tape.value(a_dst));
    let n = adj.num_nodes();
    let d = zm.cols() / heads;
    let inv_h = 1.0 / heads as f64;
    let mut gz = Matrix::zeros(n, zm.cols());
    let mut ds = vec![0.0; n * heads];
    let mut dt = vec![0.0; n * heads];
    let mut msg = vec![0.0; d];
    for v in 0..n {
        let (lo, hi) = (adj.offsets[v], adj.offsets[v + 1]);
        if lo == hi {
            continue;
        }
        let gvrow = g.row(v);
        for h in 0..heads {
            let mut dalpha = Vec::with_capacity(hi - lo);
            for e in lo..hi {
                let u = adj.sources[e];
                let ks = keep_scale.map_or(1.0, |k| k[e * heads + h]);
                let a_eff = alpha[e * heads + h] * ks;
                let zu = &zm.row(u)[h * d..(h + 1) * d];
                match edge_row(adj, e) {
                    Some(x) => {
                        for ((m, zv), xv) in msg.iter_mut().zip(zu).zip(x) {
                            *m = zv * xv;
                        }
                        let gzu = &mut gz.row_mut(u)[h * d..(h + 1) * d];
                        for ((o, gv), xv) in gzu.iter_mut().zip(gvrow).zip(x) {
                            *o += inv_h * a_eff * gv * xv;
                        }
                    }
                    None => {
                        msg.copy_from_slice(zu);
                        let gzu = &mut gz.row_mut(u)[h * d..(h + 1) * d];
                        for (o, gv) in gzu.iter_mut().zip(gvrow) {
                            *o += inv_h * a_eff * gv;
                        }
                    }
                }
                dalpha.push(inv_h * dot(gvrow, &msg) * ks);
            }
            let inner: f64 = (lo..hi)
                .zip(&dalpha)
                .map(|(e, da)| alpha[e * heads + h] * da)
                .sum();
            for (e, da) in (lo..hi).zip(&dalpha) {
                let a = alpha[e * heads + h];
                let de = a * (da - inner);
                let p = pre[e * heads + h];
                let dpre = if p > 0.0 { de } else { ATTENTION_LEAKY_SLOPE * de };
                ds[adj.sources[e] * heads + h] += dpre;
                dt[v * heads + h] += dpre;
            }
        }
    }
    let mut gs = Matrix::zeros(heads, d);
    let mut gd = Matrix::zeros(heads, d);
    for u in 0..n {
        for h in 0..heads {
            let (sv, tv) = (ds[u * heads + h], dt[u * heads + h]);
            if sv == 0.0 && tv == 0.0 {
                continue;
            }
            let zu = &zm.row(u)[h * d..(h + 1) * d];
            for (o, x) in gs.row_mut(h).iter_mut().zip(zu) {
                *o += sv * x;
            }
            for (o, x) in gd.row_mut(h).iter_mut().zip(zu) {
                *o += tv * x;
            }
            let as_row = asrc.row(h);
            let ad_row = adst.row(h);
            let gzu = &mut gz.row_mut(u)[h * d..(h + 1) * d];
            for ((o, a1), a2) in gzu.iter_mut().zip(as_row).zip(ad_row) {
                *o += sv * a1 + tv * a2;
            }
        }
    }
    (gz, gs, gd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `f` against the tape gradient for `x`.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Matrix) {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = build(&mut tape, xv);
        let grads = tape.backward(loss);
        let analytic = grads.get(xv).cloned().unwrap_or(Matrix::zeros(x.rows(), x.cols()));
        let h = 1e-6;
        for i in 0..x.data().len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.param(xp);
                let l = build(&mut t, v);
                t.value(l).to_scalar()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::uniform(r, c, 1.0, &mut rng)
    }

    /// Reduce an arbitrary matrix to a scalar with fixed random weights.
    fn project(t: &mut Tape, v: Var, seed: u64) -> Var {
        let (r, c) = t.value(v).shape();
        let w = t.constant(rand_matrix(c, 1, seed));
        let y = t.matmul(v, w);
        let ones = t.constant(Matrix::filled(1, r, 1.0));
        t.matmul(ones, y)
    }

    #[test]
    fn activations_layer_norm_and_products() {
        for act in [Activation::Gelu, Activation::Elu, Activation::Tanh] {
            check(
                |t, x| {
                    let y = t.activation(x, act);
                    project(t, y, 3)
                },
                rand_matrix(3, 4, 1),
            );
        }
        check(
            |t, x| {
                let y = t.layer_norm(x, 1e-5);
                let gain = t.constant(rand_matrix(1, 5, 8));
                let y = t.mul_row(y, gain);
                project(t, y, 4)
            },
            rand_matrix(3, 5, 2),
        );
        let x = rand_matrix(3, 5, 6);
        check(
            |t, r| {
                let xv = t.constant(x.clone());
                let y = t.mul_row(xv, r);
                let y = t.add_row(y, r);
                project(t, y, 5)
            },
            rand_matrix(1, 5, 7),
        );
        check(
            |t, x| {
                let b = t.constant(rand_matrix(5, 4, 9));
                let y = t.matmul_bt(x, b);
                let w = t.constant(rand_matrix(4, 1, 5));
                let y2 = t.matmul(x, w);
                let c = t.concat_cols(y, y2);
                let g = t.gather_rows(c, vec![0, 2, 2, 1]);
                project(t, g, 7)
            },
            rand_matrix(3, 4, 3),
        );
    }

    #[test]
    fn self_attention_gradient() {
        check(
            |t, x| {
                let wq = t.constant(rand_matrix(4, 4, 11));
                let wk = t.constant(rand_matrix(4, 4, 12));
                let q = t.matmul(x, wq);
                let k = t.matmul(x, wk);
                let y = t.self_attention(q, k, x, vec![(0, 3), (3, 2)], 2);
                project(t, y, 13)
            },
            rand_matrix(5, 4, 10),
        );
    }

    #[test]
    fn graph_attention_gradient_with_edge_features() {
        let adj = Arc::new(AttentionAdjacency {
            offsets: vec![0, 2, 5, 7],
            sources: vec![0, 1, 1, 0, 2, 2, 1],
            edge_rows: vec![None, Some(0), None, Some(1), Some(2), None, Some(3)],
            edge_features: Some(Arc::new(rand_matrix(4, 3, 21))),
        });
        let a_src = rand_matrix(2, 3, 22);
        let a_dst = rand_matrix(2, 3, 23);
        check(
            |t, x| {
                let s = t.constant(a_src.clone());
                let d = t.constant(a_dst.clone());
                let y = t.graph_attention(x, s, d, adj.clone(), 2, None);
                project(t, y, 24)
            },
            rand_matrix(3, 6, 20),
        );
        let z = rand_matrix(3, 6, 25);
        check(
            |t, s| {
                let zz = t.constant(z.clone());
                let d = t.constant(a_dst.clone());
                let y = t.graph_attention(zz, s, d, adj.clone(), 2, Some(vec![1.25; 14]));
                project(t, y, 26)
            },
            a_src.clone(),
        );
    }

    #[test]
    fn losses_have_correct_gradients() {
        check(|t, x| t.cross_entropy(x, vec![1, 0, 3]), rand_matrix(3, 4, 30));
        let target = rand_matrix(3, 4, 31);
        check(|t, x| t.cosine_loss(x, target.clone()), rand_matrix(3, 4, 32));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let p = t.param(Matrix::filled(2, 2, 1.0));
        let c = t.constant(Matrix::filled(2, 2, 2.0));
        let y = t.matmul(p, c);
        let l = t.cross_entropy(y, vec![0, 1]);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
