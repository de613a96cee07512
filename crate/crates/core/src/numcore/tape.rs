//! Matrix-level reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Operations work on whole row-major matrices, so a transformer layer is a
//! handful of nodes rather than millions of scalar ones.

use std::collections::HashMap;

use super::array::{matmul_nt_into, matmul_tn_into, DenseArray};
use super::params::{ParamId, ParamStore};

type Array = DenseArray<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleByEntry { x: Var, w: Var, index: usize },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    GatherRows { table: Var, idx: Vec<usize> },
    GatherElems { x: Var, idx: Vec<usize> },
    SegmentMean { x: Var, seg: Vec<usize>, counts: Vec<usize> },
    LeftMulConst { lhs: Array, x: Var },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    /// Adds parameter gradients into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if !store.entry(id).trainable {
                continue;
            }
            if let Some(g) = &self.grads[var.0] {
                for (dst, src) in store.grad_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
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

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        let c = av.cols();
        assert_eq!(rv.len(), c, "add_row width mismatch");
        let mut out = av.clone();
        for r in out.data_mut().chunks_exact_mut(c) {
            for (o, b) in r.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Array::from_vec(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `w[index] · x` with `w` differentiable.
    pub fn scale_by_entry(&mut self, x: Var, w: Var, index: usize) -> Var {
        let s = self.value(w).data()[index];
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::ScaleByEntry { x, w, index })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c, "layer_norm gamma width");
        assert_eq!(b.len(), c, "layer_norm beta width");
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Array::from_vec(xv.shape().to_vec(), out).expect("same shape");
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`.
    ///
    /// Rows are split into `groups` equal blocks; query block `g` only sees
    /// key block `g`. `bias`, when present, has one row per query and one
    /// column per key of its block and is added to the logits.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        bias: Option<&Array>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.cols(), d, "attention value width");
        assert_eq!(kv.rows(), vv.rows(), "attention key/value rows");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        let (lq, lk) = (qv.rows(), kv.rows());
        assert!(groups > 0 && lq % groups == 0 && lk % groups == 0, "bad groups");
        let (lqg, lkg) = (lq / groups, lk / groups);
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[lq, lkg], "attention bias shape");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; heads * lq * lkg];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lkg];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lqg {
                    let qi = g * lqg + i;
                    let qrow = &qd[qi * d + off..qi * d + off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = g * lkg + j;
                        let krow = &kd[kj * d + off..kj * d + off + dh];
                        let mut acc = 0.0;
                        for (a, b) in qrow.iter().zip(krow) {
                            acc += a * b;
                        }
                        *s = acc * scale + bias.map_or(0.0, |b| b.data()[qi * lkg + j]);
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let prow = &mut probs[(h * lq + qi) * lkg..(h * lq + qi + 1) * lkg];
                    let orow = &mut out[qi * d + off..qi * d + off + dh];
                    for (j, (p, s)) in prow.iter_mut().zip(&scores).enumerate() {
                        *p = s / z;
                        let kj = g * lkg + j;
                        let vrow = &vd[kj * d + off..kj * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += *p * x;
                        }
                    }
                }
            }
        }
        let out = Array::from_vec(vec![lq, d], out).expect("attention shape");
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                scale,
                probs,
            },
        )
    }

    /// Softmax weights recorded by an attention node, laid out
    /// `[head][query][key-within-group]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Every attention node recorded so far, in creation order.
    pub fn attention_nodes(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Attention { .. }))
            .map(Var)
            .collect()
    }

    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let out = self.value(table).select_rows(&idx);
        self.push(out, Op::GatherRows { table, idx })
    }

    /// `out.data[i] = x.data[idx[i]]`, reshaped to `shape`.
    pub fn gather_elems(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let xd = self.value(x).data();
        let data = idx.iter().map(|&i| xd[i]).collect();
        let out = Array::from_vec(shape.to_vec(), data).expect("gather_elems shape");
        self.push(out, Op::GatherElems { x, idx })
    }

    /// Mean of the rows of `x` belonging to each segment.
    ///
    /// Computed as `first + Σ(row − first)/n`, so a segment whose rows are
    /// identical returns that row bit for bit.
    pub fn segment_mean(&mut self, x: Var, seg: Vec<usize>, n_seg: usize) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert_eq!(seg.len(), xv.rows(), "segment_mean labels");
        let mut counts = vec![0usize; n_seg];
        let mut first = vec![usize::MAX; n_seg];
        for (r, &s) in seg.iter().enumerate() {
            assert!(s < n_seg, "segment label out of range");
            counts[s] += 1;
            if first[s] == usize::MAX {
                first[s] = r;
            }
        }
        assert!(counts.iter().all(|&n| n > 0), "empty segment");
        let mut acc = vec![0.0; n_seg * c];
        for (r, &s) in seg.iter().enumerate() {
            let base = xv.row(first[s]);
            for ((a, x), b) in acc[s * c..(s + 1) * c].iter_mut().zip(xv.row(r)).zip(base) {
                *a += x - b;
            }
        }
        for s in 0..n_seg {
            let base = xv.row(first[s]);
            for (a, b) in acc[s * c..(s + 1) * c].iter_mut().zip(base) {
                *a = b + *a / counts[s] as f64;
            }
        }
        let out = Array::from_vec(vec![n_seg, c], acc).expect("segment_mean shape");
        self.push(out, Op::SegmentMean { x, seg, counts })
    }

    /// `lhs · x` with a constant left operand.
    pub fn left_mul_const(&mut self, lhs: Array, x: Var) -> Var {
        let out = lhs.matmul(self.value(x));
        self.push(out, Op::LeftMulConst { lhs, x })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .clone()
            .reshape(shape)
            .expect("reshape extent mismatch");
        self.push(out, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array::full(&[1], s), Op::Sum(a))
    }

    /// `−log softmax(logits)[target]` over all elements of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let l = self.value(logits).data();
        assert!(target < l.len(), "cross_entropy target out of range");
        let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(l[target] - mx - z.ln());
        self.push(
            Array::full(&[1], loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| p.0);
        Gradients { grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                let ga = slot(grads, *a, av.shape());
                matmul_nt_into(g.data(), bv.data(), ga, n, m, k);
                let gb = slot(grads, *b, bv.shape());
                matmul_tn_into(av.data(), g.data(), gb, n, k, m);
            }
            Op::Add(a, b) => {
                accumulate(slot(grads, *a, g.shape()), g.data());
                accumulate(slot(grads, *b, g.shape()), g.data());
            }
            Op::AddRow(a, row) => {
                accumulate(slot(grads, *a, g.shape()), g.data());
                let rshape = self.value(*row).shape().to_vec();
                let gr = slot(grads, *row, &rshape);
                let c = gr.len();
                for r in g.data().chunks_exact(c) {
                    accumulate(gr, r);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, av.shape());
                for ((o, gi), y) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                    *o += gi * y;
                }
                let gb = slot(grads, *b, bv.shape());
                for ((o, gi), x) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi * x;
                }
            }
            Op::Scale(a, s) => {
                let ga = slot(grads, *a, g.shape());
                for (o, gi) in ga.iter_mut().zip(g.data()) {
                    *o += gi * s;
                }
            }
            Op::ScaleByEntry { x, w, index } => {
                let s = self.value(*w).data()[*index];
                let xv = self.value(*x);
                let dot: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                let gx = slot(grads, *x, xv.shape());
                for (o, gi) in gx.iter_mut().zip(g.data()) {
                    *o += gi * s;
                }
                let wshape = self.value(*w).shape().to_vec();
                slot(grads, *w, &wshape)[*index] += dot;
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, av.shape());
                for ((o, gi), x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                    *o += gi * gelu_grad(*x);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gam = self.value(*gamma).data().to_vec();
                {
                    let gb = slot(grads, *beta, &[c]);
                    for r in g.data().chunks_exact(c) {
                        accumulate(gb, r);
                    }
                }
                {
                    let gg = slot(grads, *gamma, &[c]);
                    for (r, h) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += r[j] * h[j];
                        }
                    }
                }
                let xshape = self.value(*x).shape().to_vec();
                let gx = slot(grads, *x, &xshape);
                let mut dxh = vec![0.0; c];
                for (row, ((gr, h), is)) in g
                    .data()
                    .chunks_exact(c)
                    .zip(xhat.chunks_exact(c))
                    .zip(inv_std)
                    .enumerate()
                {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        dxh[j] = gr[j] * gam[j];
                        m1 += dxh[j];
                        m2 += dxh[j] * h[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let out = &mut gx[row * c..(row + 1) * c];
                    for j in 0..c {
                        out[j] += is * (dxh[j] - m1 - h[j] * m2);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                scale,
                probs,
            } => self.backprop_attention(g, *q, *k, *v, *heads, *groups, *scale, probs, grads),
            Op::GatherRows { table, idx } => {
                let tshape = self.value(*table).shape().to_vec();
                let c = g.cols();
                let gt = slot(grads, *table, &tshape);
                for (r, &i) in g.data().chunks_exact(c).zip(idx) {
                    accumulate(&mut gt[i * c..(i + 1) * c], r);
                }
            }
            Op::GatherElems { x, idx } => {
                let xshape = self.value(*x).shape().to_vec();
                let gx = slot(grads, *x, &xshape);
                for (gi, &i) in g.data().iter().zip(idx) {
                    gx[i] += gi;
                }
            }
            Op::SegmentMean { x, seg, counts } => {
                let xshape = self.value(*x).shape().to_vec();
                let c = g.cols();
                let gx = slot(grads, *x, &xshape);
                for (r, &s) in seg.iter().enumerate() {
                    let inv = 1.0 / counts[s] as f64;
                    let src = &g.data()[s * c..(s + 1) * c];
                    for (o, gi) in gx[r * c..(r + 1) * c].iter_mut().zip(src) {
                        *o += gi * inv;
                    }
                }
            }
            Op::LeftMulConst { lhs, x } => {
                let xshape = self.value(*x).shape().to_vec();
                let (n, k, m) = (lhs.rows(), lhs.cols(), g.cols());
                let gx = slot(grads, *x, &xshape);
                matmul_tn_into(lhs.data(), g.data(), gx, n, k, m);
            }
            Op::Reshape(a) => {
                let ashape = self.value(*a).shape().to_vec();
                accumulate(slot(grads, *a, &ashape), g.data());
            }
            Op::Sum(a) => {
                let ashape = self.value(*a).shape().to_vec();
                let s = g.data()[0];
                slot(grads, *a, &ashape).iter_mut().for_each(|o| *o += s);
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let lshape = self.value(*logits).shape().to_vec();
                let s = g.data()[0];
                let gl = slot(grads, *logits, &lshape);
                for (i, (o, p)) in gl.iter_mut().zip(probs).enumerate() {
                    let y = if i == *target { 1.0 } else { 0.0 };
                    *o += s * (p - y);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &Array,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        scale: f64,
        probs: &[f64],
        grads: &mut [Option<Array>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (lq, lk) = (qv.rows(), kv.rows());
        let (lqg, lkg) = (lq / groups, lk / groups);
        let dh = d / heads;
        let mut dq = vec![0.0; lq * d];
        let mut dk = vec![0.0; lk * d];
        let mut dv = vec![0.0; lk * d];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dp = vec![0.0; lkg];
        for grp in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lqg {
                    let qi = grp * lqg + i;
                    let prow = &probs[(h * lq + qi) * lkg..(h * lq + qi + 1) * lkg];
                    let grow = &gd[qi * d + off..qi * d + off + dh];
                    let mut dot = 0.0;
                    for (j, (dpj, &p)) in dp.iter_mut().zip(prow).enumerate() {
                        let kj = grp * lkg + j;
                        let vrow = &vd[kj * d + off..kj * d + off + dh];
                        let mut acc = 0.0;
                        for (a, b) in grow.iter().zip(vrow) {
                            acc += a * b;
                        }
                        *dpj = acc;
                        dot += p * acc;
                        let dvrow = &mut dv[kj * d + off..kj * d + off + dh];
                        for (o, gi) in dvrow.iter_mut().zip(grow) {
                            *o += p * gi;
                        }
                    }
                    let qrow = &qd[qi * d + off..qi * d + off + dh];
                    for (j, (&dpj, &p)) in dp.iter().zip(prow).enumerate() {
                        let ds = p * (dpj - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = grp * lkg + j;
                        let krow = &kd[kj * d + off..kj * d + off + dh];
                        let dqrow = &mut dq[qi * d + off..qi * d + off + dh];
                        for (o, kx) in dqrow.iter_mut().zip(krow) {
                            *o += ds * kx;
                        }
                        let dkrow = &mut dk[kj * d + off..kj * d + off + dh];
                        for (o, qx) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * qx;
                        }
                    }
                }
            }
        }
        accumulate(slot(grads, q, &[lq, d]), &dq);
        accumulate(slot(grads, k, &[lk, d]), &dk);
        accumulate(slot(grads, v, &[lk, d]), &dv);
    }
}

fn slot<'a>(grads: &'a mut [Option<Array>], v: Var, shape: &[usize]) -> &'a mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Array::zeros(shape))
        .data_mut()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_array(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array {
        Array::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of one tape-built scalar function of `x`.
    fn check_input_grad(x: Array, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = f(&mut tape, xv);
        let grads = tape.backward(y);
        let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Array::zeros(x.shape()));
        let eps = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let out = f(&mut t, v);
                t.value(out).data()[0]
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            assert!(err < 1e-6, "elem {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn matmul_and_elementwise_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_array(&mut rng, 4, 3);
        let c = rand_array(&mut rng, 2, 3);
        check_input_grad(rand_array(&mut rng, 2, 4), |t, x| {
            let wv = t.constant(w.clone());
            let cv = t.constant(c.clone());
            let y = t.matmul(x, wv);
            let y = t.gelu(y);
            let y = t.mul(y, cv);
            let y = t.scale(y, 0.7);
            t.sum(y)
        });
    }

    #[test]
    fn layer_norm_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gamma = rand_array(&mut rng, 1, 5).reshape(&[5]).unwrap();
        let beta = rand_array(&mut rng, 1, 5).reshape(&[5]).unwrap();
        let c = rand_array(&mut rng, 3, 5);
        check_input_grad(rand_array(&mut rng, 3, 5), |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let cv = t.constant(c.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let y = t.mul(y, cv);
            t.sum(y)
        });
    }

    #[test]
    fn attention_grad_all_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = rand_array(&mut rng, 6, 4);
        let v = rand_array(&mut rng, 6, 4);
        let c = rand_array(&mut rng, 4, 4);
        let mut bias = Array::zeros(&[4, 3]);
        bias.set(1, 2, -1e9);
        for groups in [1usize, 2] {
            let bias = if groups == 2 { Some(bias.clone()) } else { None };
            check_input_grad(rand_array(&mut rng, 4, 4), |t, q| {
                let kv = t.constant(k.clone());
                let vv = t.constant(v.clone());
                let cv = t.constant(c.clone());
                let o = t.attention(q, kv, vv, 2, groups, bias.as_ref());
                let o = t.mul(o, cv);
                t.sum(o)
            });
            // Gradient with respect to keys and values through the same node.
            let q = rand_array(&mut rng, 4, 4);
            check_input_grad(k.clone(), |t, kv| {
                let qv = t.constant(q.clone());
                let o = t.attention(qv, kv, kv, 2, groups, bias.as_ref());
                let cv = t.constant(c.clone());
                let o = t.mul(o, cv);
                t.sum(o)
            });
        }
    }

    #[test]
    fn gather_segment_and_cross_entropy_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let lhs = rand_array(&mut rng, 2, 5);
        check_input_grad(rand_array(&mut rng, 5, 3), |t, x| {
            let a = t.gather_rows(x, vec![4, 0, 0, 2]);
            let b = t.segment_mean(x, vec![1, 0, 1, 2, 0], 3);
            let c = t.left_mul_const(lhs.clone(), x);
            let e = t.gather_elems(x, vec![14, 3, 3, 7], &[4, 1]);
            let r = t.reshape(a, &[2, 6]);
            let s1 = t.sum(r);
            let ce = t.cross_entropy(b, 4);
            let s2 = t.sum(c);
            let s3 = t.sum(e);
            let y = t.add(s1, ce);
            let y = t.add(y, s2);
            let y = t.mul(y, s3);
            t.sum(y)
        });
    }

    #[test]
    fn segment_mean_of_identical_rows_is_exact() {
        let row = [0.1, 1.0 / 3.0, -7.25e-3];
        let x = Array::from_fn(7, 3, |_, j| row[j]);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let m = t.segment_mean(xv, vec![0; 7], 1);
        assert_eq!(t.value(m).data(), &row);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut t = Tape::new();
        let q = t.constant(rand_array(&mut rng, 6, 8));
        let k = t.constant(rand_array(&mut rng, 9, 8));
        let o = t.attention(q, k, k, 4, 3, None);
        let p = t.attention_probs(o).unwrap();
        for row in p.chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn params_accumulate_into_store() {
        let mut store = ParamStore::new();
        let w = store.add_full("w", &[2, 1], 2.0).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Array::from_fn(1, 2, |_, j| j as f64 + 1.0));
        let wv = t.param(&store, w);
        assert_eq!(t.param(&store, w), wv);
        let y = t.matmul(x, wv);
        let y = t.sum(y);
        t.backward(y).accumulate_into(&mut store);
        assert_eq!(store.grad(w).data(), &[1.0, 2.0]);
    }
}
