//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] with one or more seed gradients walks the tape in reverse
//! and returns the gradient of every trainable parameter that participated.
//! Frozen parameters enter the tape as constants, so they never receive a
//! gradient at all.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape of a blocked multi-head attention call.
///
/// Queries and keys are stacked blocks: block `b` of `q` (rows
/// `b*q_block..(b+1)*q_block`) attends only to block `b` of `k`/`v`.
#[derive(Clone, Debug)]
pub struct AttnSpec {
    pub heads: usize,
    pub q_block: usize,
    pub kv_block: usize,
    /// `mask[i][j] == true` allows query row `i` to see key row `j` within a block.
    pub mask: Option<Arc<Array2<bool>>>,
    /// Keys/values are a single head shared by every query head.
    pub shared_kv: bool,
}

impl AttnSpec {
    pub fn new(heads: usize, q_block: usize, kv_block: usize) -> Self {
        Self {
            heads,
            q_block,
            kv_block,
            mask: None,
            shared_kv: false,
        }
    }

    pub fn with_mask(mut self, mask: Arc<Array2<bool>>) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn shared_kv(mut self) -> Self {
        self.shared_kv = true;
        self
    }
}

/// Lower-triangular visibility mask of side `n`.
pub fn causal_mask(n: usize) -> Arc<Array2<bool>> {
    Arc::new(Array2::from_shape_fn((n, n), |(i, j)| j <= i))
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<Mat>,
    },
    Gather(Var, Vec<usize>),
    BlockMean(Var, usize),
    L2Normalize(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Parameter gradients produced by a backward pass.
#[derive(Debug, Default, Clone)]
pub struct Grads {
    by_param: BTreeMap<ParamId, Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Mat)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|x| x * c);
        }
    }

    /// Sum of squared entries over every gradient.
    pub fn sq_norm(&self) -> f64 {
        self.by_param
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    pub fn accumulate(&mut self, other: Grads) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => *acc += &g,
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Softmax weights of an attention node, one matrix per (block, head).
    pub fn attention_weights(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never differentiated.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf. Frozen parameters enter as constants. Repeated calls
    /// for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// `a + tile(b)`: `b` has `k` rows and is repeated down `a`, whose row
    /// count must be a multiple of `k`. A 1×n `b` is a broadcast bias.
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let k = bv.nrows();
        assert!(
            k > 0 && av.nrows() % k == 0 && av.ncols() == bv.ncols(),
            "add_tiled shape mismatch: {:?} vs {:?}",
            av.dim(),
            bv.dim()
        );
        let mut out = av.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row += &bv.row(r % k);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::AddTiled(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Multiply every entry of `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let out = self.value(a) * sv;
        let ng = self.needs(a) || self.needs(s);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut rstd = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            row *= &g;
            row += &b;
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Blocked multi-head scaled dot-product attention; see [`AttnSpec`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), &spec);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            ng,
        )
    }

    /// Row gather: output row `r` is row `ids[r]` of `src`.
    pub fn gather(&mut self, src: Var, ids: Vec<usize>) -> Var {
        let sv = self.value(src);
        let mut out = Mat::zeros((ids.len(), sv.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&sv.row(i));
        }
        let ng = self.needs(src);
        self.push(out, Op::Gather(src, ids), ng)
    }

    /// Mean over consecutive groups of `block` rows.
    pub fn block_mean(&mut self, x: Var, block: usize) -> Var {
        let xv = self.value(x);
        assert!(block > 0 && xv.nrows() % block == 0);
        let nb = xv.nrows() / block;
        let mut out = Mat::zeros((nb, xv.ncols()));
        for b in 0..nb {
            let m = xv
                .slice(s![b * block..(b + 1) * block, ..])
                .mean_axis(Axis(0))
                .expect("non-empty block");
            out.row_mut(b).assign(&m);
        }
        let ng = self.needs(x);
        self.push(out, Op::BlockMean(x, block), ng)
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row /= n;
            norms.push(n);
        }
        let ng = self.needs(x);
        self.push(out, Op::L2Normalize(x, norms), ng)
    }

    /// Summed softmax cross-entropy over rows; `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(lv);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                loss -= probs[[r, t]].max(f64::MIN_POSITIVE).ln();
            }
        }
        let ng = self.needs(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Mat::from_elem((1, 1), total), Op::Sum(x), ng)
    }

    /// Backpropagate from a scalar node.
    pub fn backward_scalar(&self, loss: Var) -> Grads {
        self.backward(&[(loss, Mat::from_elem((1, 1), 1.0))])
    }

    /// Backpropagate from arbitrary seed gradients.
    pub fn backward(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).dim(), g.dim(), "seed gradient shape");
            acc(&mut grads, *v, g.clone());
        }
        let mut out = Grads::default();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if let Some(pid) = node.param {
                out.by_param.insert(pid, dy);
                continue;
            }
            self.propagate(node, &dy, &mut grads);
        }
        out
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, dy.dot(&self.value(*b).t()));
                }
                if self.needs(*b) {
                    acc(grads, *b, self.value(*a).t().dot(dy));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, dy.clone());
                }
            }
            Op::AddTiled(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, dy.clone());
                }
                if self.needs(*b) {
                    let k = self.value(*b).nrows();
                    let mut db = Mat::zeros(self.value(*b).dim());
                    for (r, row) in dy.rows().into_iter().enumerate() {
                        let mut t = db.row_mut(r % k);
                        t += &row;
                    }
                    acc(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, dy * self.value(*b));
                }
                if self.needs(*b) {
                    acc(grads, *b, dy * self.value(*a));
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    acc(grads, *a, dy * *c);
                }
            }
            Op::ScaleBy(a, s) => {
                if self.needs(*a) {
                    acc(grads, *a, dy * self.scalar(*s));
                }
                if self.needs(*s) {
                    let ds = (dy * self.value(*a)).sum();
                    acc(grads, *s, Mat::from_elem((1, 1), ds));
                }
            }
            Op::Tanh(a) => {
                let mut da = dy.clone();
                Zip::from(&mut da)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                acc(grads, *a, da);
            }
            Op::Gelu(a) => {
                let mut da = dy.clone();
                Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| {
                    let u = GELU_K * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_K * (1.0 + 3.0 * 0.044715 * x * x);
                    *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                });
                acc(grads, *a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let g = self.value(*gamma).row(0).to_owned();
                if self.needs(*gamma) {
                    let dg = (dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(grads, *gamma, dg);
                }
                if self.needs(*beta) {
                    acc(grads, *beta, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.needs(*x) {
                    let (n, d) = dy.dim();
                    let mut dx = Mat::zeros((n, d));
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..d).map(|c| dy[[r, c]] * g[c]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat
                            .iter()
                            .enumerate()
                            .map(|(c, v)| v * xhat[[r, c]])
                            .sum::<f64>()
                            / d as f64;
                        for c in 0..d {
                            dx[[r, c]] = rstd[r] * (dxhat[c] - m1 - xhat[[r, c]] * m2);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    spec,
                    probs,
                    dy,
                );
                if self.needs(*q) {
                    acc(grads, *q, dq);
                }
                if self.needs(*k) {
                    acc(grads, *k, dk);
                }
                if self.needs(*v) {
                    acc(grads, *v, dv);
                }
            }
            Op::Gather(src, ids) => {
                let mut ds = Mat::zeros(self.value(*src).dim());
                for (r, &i) in ids.iter().enumerate() {
                    let mut t = ds.row_mut(i);
                    t += &dy.row(r);
                }
                acc(grads, *src, ds);
            }
            Op::BlockMean(x, block) => {
                let mut dx = Mat::zeros(self.value(*x).dim());
                let inv = 1.0 / *block as f64;
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    row.assign(&(&dy.row(r / block) * inv));
                }
                acc(grads, *x, dx);
            }
            Op::L2Normalize(x, norms) => {
                let y = &node.value;
                let mut dx = dy.clone();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let dot = y.row(r).dot(&dy.row(r));
                    row.scaled_add(-dot, &y.row(r));
                    row /= norms[r];
                }
                acc(grads, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let up = dy[[0, 0]];
                let mut dl = Mat::zeros(probs.dim());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let mut row = dl.row_mut(r);
                        row.assign(&probs.row(r));
                        row[t] -= 1.0;
                        row *= up;
                    }
                }
                acc(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let up = dy[[0, 0]];
                acc(grads, *x, Mat::from_elem(self.value(*x).dim(), up));
            }
        }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    out
}

fn head_cols(spec: &AttnSpec, h: usize, dh: usize) -> (usize, usize) {
    let off = if spec.shared_kv { 0 } else { h * dh };
    (off, off + dh)
}

fn check_attention(q: &Mat, k: &Mat, v: &Mat, spec: &AttnSpec) -> (usize, usize) {
    assert!(spec.heads > 0 && q.ncols() % spec.heads == 0, "q width vs heads");
    let dh = q.ncols() / spec.heads;
    let kv_width = if spec.shared_kv { dh } else { q.ncols() };
    assert_eq!(k.ncols(), kv_width, "k width");
    assert_eq!(v.ncols(), kv_width, "v width");
    assert_eq!(k.nrows(), v.nrows());
    assert!(q.nrows() % spec.q_block == 0 && k.nrows() % spec.kv_block == 0);
    let nb = q.nrows() / spec.q_block;
    assert_eq!(nb, k.nrows() / spec.kv_block, "block count mismatch");
    if let Some(m) = &spec.mask {
        assert_eq!(m.dim(), (spec.q_block, spec.kv_block), "mask shape");
    }
    (nb, dh)
}

fn attention_forward(q: &Mat, k: &Mat, v: &Mat, spec: &AttnSpec) -> (Mat, Vec<Mat>) {
    let (nb, dh) = check_attention(q, k, v, spec);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qb, kb) = (spec.q_block, spec.kv_block);
    let mut out = Mat::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(nb * spec.heads);
    for b in 0..nb {
        for h in 0..spec.heads {
            let qs = q.slice(s![b * qb..(b + 1) * qb, h * dh..(h + 1) * dh]);
            let (c0, c1) = head_cols(spec, h, dh);
            let ks = k.slice(s![b * kb..(b + 1) * kb, c0..c1]);
            let vs = v.slice(s![b * kb..(b + 1) * kb, c0..c1]);
            let mut sc = qs.dot(&ks.t()) * scale;
            for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                if let Some(m) = &spec.mask {
                    for (j, x) in row.iter_mut().enumerate() {
                        if !m[[i, j]] {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                }
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                if mx == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                row.mapv_inplace(|x| (x - mx).exp());
                let z = row.sum();
                row /= z;
            }
            out.slice_mut(s![b * qb..(b + 1) * qb, h * dh..(h + 1) * dh])
                .assign(&sc.dot(&vs));
            probs.push(sc);
        }
    }
    (out, probs)
}

fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    spec: &AttnSpec,
    probs: &[Mat],
    dy: &Mat,
) -> (Mat, Mat, Mat) {
    let (nb, dh) = check_attention(q, k, v, spec);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qb, kb) = (spec.q_block, spec.kv_block);
    let mut dq = Mat::zeros(q.dim());
    let mut dk = Mat::zeros(k.dim());
    let mut dv = Mat::zeros(v.dim());
    for b in 0..nb {
        for h in 0..spec.heads {
            let p = &probs[b * spec.heads + h];
            let qs = q.slice(s![b * qb..(b + 1) * qb, h * dh..(h + 1) * dh]);
            let (c0, c1) = head_cols(spec, h, dh);
            let ks = k.slice(s![b * kb..(b + 1) * kb, c0..c1]);
            let vs = v.slice(s![b * kb..(b + 1) * kb, c0..c1]);
            let dout = dy.slice(s![b * qb..(b + 1) * qb, h * dh..(h + 1) * dh]);
            let dp = dout.dot(&vs.t());
            {
                let mut t = dv.slice_mut(s![b * kb..(b + 1) * kb, c0..c1]);
                t += &p.t().dot(&dout);
            }
            let mut ds = dp.clone();
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let dot: f64 = p.row(i).dot(&dp.row(i));
                for (j, x) in row.iter_mut().enumerate() {
                    *x = p[[i, j]] * (*x - dot) * scale;
                }
            }
            {
                let mut t = dq.slice_mut(s![b * qb..(b + 1) * qb, h * dh..(h + 1) * dh]);
                t += &ds.dot(&ks);
            }
            {
                let mut t = dk.slice_mut(s![b * kb..(b + 1) * kb, c0..c1]);
                t += &ds.t().dot(&qs);
            }
        }
    }
    (dq, dk, dv)
}
