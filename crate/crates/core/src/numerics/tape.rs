//! Tape-based reverse-mode differentiation over whole-tensor operations.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the vector-Jacobian product. `Tape::backward` replays the nodes in
//! reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

use super::tensor::split_axis;
use super::{Scalar, Tensor};

const RMS_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, s: T },
    Transpose { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<T> },
    Silu { x: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    SliceRows { a: usize, start: usize },
    SelectRows { a: usize, rows: Vec<usize> },
    ReplaceRows { base: usize, values: usize, rows: Vec<usize> },
    Softmax { a: usize, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<T> },
    Sum { a: usize },
    Rope { x: usize, positions: Vec<usize>, n_heads: usize, base: f64 },
    Attention(Box<AttentionSaved<T>>),
    SegmentMax { x: usize, argmax: Vec<usize> },
}

struct AttentionSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    lens: Vec<usize>,
    n_heads: usize,
    probs: Vec<T>,
    offsets: Vec<usize>,
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass. Single-threaded by construction.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    backward_done: Cell<bool>,
    score_pairs: Cell<u64>,
    poisoned: Cell<Option<&'static str>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            score_pairs: Cell::new(0),
            poisoned: Cell::new(None),
        }
    }

    /// Registers a trainable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of query/key score evaluations performed by attention ops so far.
    pub fn score_pairs(&self) -> u64 {
        self.score_pairs.get()
    }

    /// Fails if any forward op produced NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match self.poisoned.get() {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Var<'_, T> {
        if self.poisoned.get().is_none() && !value.is_finite() {
            self.poisoned.set(Some(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands live on different tapes"))
        }
    }

    /// Concatenates matrices (or any equal-rank tensors) along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(Error::Empty("concat"))?;
        let base_shape = first.shape();
        let (outer, _, inner) = split_axis(&base_shape, axis, "concat")?;
        let mut total = 0;
        let mut values = Vec::with_capacity(parts.len());
        for p in parts {
            self.same_tape(p, "concat")?;
            let v = p.value();
            let s = v.shape();
            if s.len() != base_shape.len()
                || s.iter().zip(&base_shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{base_shape:?} vs {s:?} along axis {axis}")));
            }
            total += s[axis];
            values.push(v);
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis }, rg, "concat"))
    }

    /// Looks up rows of `table` ([vocab × d]) for each id.
    pub fn embedding<'t>(&'t self, table: Var<'t, T>, ids: &[usize]) -> Result<Var<'t, T>> {
        self.same_tape(&table, "embedding")?;
        let t = table.value();
        let (rows, d) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("embedding", format!("id {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding { table: table.id, ids: ids.to_vec() }, table.requires_grad(), "embedding"))
    }

    /// Multi-head attention where query `a` sees the first `lens[a]` key rows.
    ///
    /// `q` is [A × D], `k` and `v` are [K × D] with D = `n_heads` · head_dim.
    /// Scores are scaled by 1/sqrt(head_dim). Each call adds Σ lens to the
    /// tape's score-pair counter.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
        lens: &[usize],
        n_heads: usize,
    ) -> Result<Var<'t, T>> {
        for x in [&q, &k, &v] {
            self.same_tape(x, "attention")?;
        }
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        let (a_rows, d) = qv.dims2()?;
        let (k_rows, dk) = kv.dims2()?;
        if dk != d || vv.shape() != kv.shape() {
            return Err(Error::shape("attention", format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape())));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::shape("attention", format!("{d} not divisible into {n_heads} heads")));
        }
        if lens.len() != a_rows || lens.iter().any(|&l| l == 0 || l > k_rows) {
            return Err(Error::shape("attention", format!("visible lengths must be in 1..={k_rows} for {a_rows} queries")));
        }
        let dh = d / n_heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let kh = to_head_major(kv.data(), k_rows, n_heads, dh);
        let vh = to_head_major(vv.data(), k_rows, n_heads, dh);

        let mut offsets = Vec::with_capacity(a_rows);
        let mut total = 0;
        for &l in lens {
            offsets.push(total);
            total += l * n_heads;
        }
        let mut probs = vec![T::zero(); total];
        let mut out = vec![T::zero(); a_rows * d];
        let dims = AttnDims { k_rows, n_heads, dh, scale };
        attn_forward(&dims, qv.data(), &kh, &vh, lens, &offsets, &mut probs, &mut out);
        self.score_pairs.set(self.score_pairs.get() + lens.iter().sum::<usize>() as u64);
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        let saved = AttentionSaved { q: q.id, k: k.id, v: v.id, lens: lens.to_vec(), n_heads, probs, offsets };
        Ok(self.push(Tensor::new(vec![a_rows, d], out)?, Op::Attention(Box::new(saved)), rg, "attention"))
    }

    /// Computes gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        self.same_tape(&loss, "backward")?;
        if self.backward_done.get() {
            return Err(Error::Backward("backward already ran; call reset_grads first"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let out = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        *self.grads.borrow_mut() = out;
        self.backward_done.set(true);
        Ok(())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }
}

#[derive(Clone, Copy)]
struct AttnDims<T> {
    k_rows: usize,
    n_heads: usize,
    dh: usize,
    scale: T,
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn attn_forward_body<T: Scalar>(dims: &AttnDims<T>, q: &[T], kh: &[T], vh: &[T], lens: &[usize], offsets: &[usize], probs: &mut [T], out: &mut [T]) {
    let AttnDims { k_rows, n_heads, dh, scale } = *dims;
    let d = n_heads * dh;
    for (a, &len) in lens.iter().enumerate() {
        for h in 0..n_heads {
            let qs = &q[a * d + h * dh..a * d + (h + 1) * dh];
            let p = &mut probs[offsets[a] + h * len..offsets[a] + (h + 1) * len];
            let keys = &kh[h * k_rows * dh..];
            let mut max = T::neg_infinity();
            for (t, pt) in p.iter_mut().enumerate() {
                let s = dot(qs, &keys[t * dh..(t + 1) * dh]) * scale;
                *pt = s;
                max = max.max(s);
            }
            let mut sum = T::zero();
            for pt in p.iter_mut() {
                *pt = (*pt - max).exp();
                sum += *pt;
            }
            let inv = T::one() / sum;
            let o = &mut out[a * d + h * dh..a * d + (h + 1) * dh];
            let values = &vh[h * k_rows * dh..];
            for (t, pt) in p.iter_mut().enumerate() {
                *pt *= inv;
                axpy(*pt, &values[t * dh..(t + 1) * dh], o);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn attn_forward_avx2<T: Scalar>(dims: &AttnDims<T>, q: &[T], kh: &[T], vh: &[T], lens: &[usize], offsets: &[usize], probs: &mut [T], out: &mut [T]) {
    attn_forward_body(dims, q, kh, vh, lens, offsets, probs, out)
}

/// Wider vectors change only throughput: every lane keeps the same operation order.
#[allow(clippy::too_many_arguments)]
fn attn_forward<T: Scalar>(dims: &AttnDims<T>, q: &[T], kh: &[T], vh: &[T], lens: &[usize], offsets: &[usize], probs: &mut [T], out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { attn_forward_avx2(dims, q, kh, vh, lens, offsets, probs, out) };
    }
    attn_forward_body(dims, q, kh, vh, lens, offsets, probs, out)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn attn_backward_body<T: Scalar>(dims: &AttnDims<T>, q: &[T], kh: &[T], vh: &[T], s: &AttentionSaved<T>, g: &[T], dq: &mut [T], dkh: &mut [T], dvh: &mut [T]) {
    let AttnDims { k_rows, n_heads, dh, scale } = *dims;
    let d = n_heads * dh;
    let mut dp = Vec::new();
    for (a, &len) in s.lens.iter().enumerate() {
        for h in 0..n_heads {
            let p = &s.probs[s.offsets[a] + h * len..s.offsets[a] + (h + 1) * len];
            let go = &g[a * d + h * dh..a * d + (h + 1) * dh];
            let qs = &q[a * d + h * dh..a * d + (h + 1) * dh];
            let hk = h * k_rows * dh;
            dp.clear();
            let mut weighted = T::zero();
            for (t, &pt) in p.iter().enumerate() {
                let dpt = dot(go, &vh[hk + t * dh..hk + (t + 1) * dh]);
                weighted += pt * dpt;
                dp.push(dpt);
                axpy(pt, go, &mut dvh[hk + t * dh..hk + (t + 1) * dh]);
            }
            let dqs = &mut dq[a * d + h * dh..a * d + (h + 1) * dh];
            for (t, &pt) in p.iter().enumerate() {
                let ds = pt * (dp[t] - weighted) * scale;
                axpy(ds, &kh[hk + t * dh..hk + (t + 1) * dh], dqs);
                axpy(ds, qs, &mut dkh[hk + t * dh..hk + (t + 1) * dh]);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn attn_backward_avx2<T: Scalar>(dims: &AttnDims<T>, q: &[T], kh: &[T], vh: &[T], s: &AttentionSaved<T>, g: &[T], dq: &mut [T], dkh: &mut [T], dvh: &mut [T]) {
    attn_backward_body(dims, q, kh, vh, s, g, dq, dkh, dvh)
}

#[allow(clippy::too_many_arguments)]
fn attn_backward<T: Scalar>(dims: &AttnDims<T>, q: &[T], kh: &[T], vh: &[T], s: &AttentionSaved<T>, g: &[T], dq: &mut [T], dkh: &mut [T], dvh: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { attn_backward_avx2(dims, q, kh, vh, s, g, dq, dkh, dvh) };
    }
    attn_backward_body(dims, q, kh, vh, s, g, dq, dkh, dvh)
}

fn to_head_major<T: Scalar>(data: &[T], rows: usize, n_heads: usize, dh: usize) -> Vec<T> {
    let d = n_heads * dh;
    let mut out = vec![T::zero(); rows * d];
    for t in 0..rows {
        for h in 0..n_heads {
            out[(h * rows + t) * dh..(h * rows + t + 1) * dh].copy_from_slice(&data[t * d + h * dh..t * d + (h + 1) * dh]);
        }
    }
    out
}

fn from_head_major_add<T: Scalar>(src: &[T], rows: usize, n_heads: usize, dh: usize, dst: &mut [T]) {
    let d = n_heads * dh;
    for t in 0..rows {
        for h in 0..n_heads {
            let s = &src[(h * rows + t) * dh..(h * rows + t + 1) * dh];
            for (o, v) in dst[t * d + h * dh..t * d + (h + 1) * dh].iter_mut().zip(s) {
                *o += *v;
            }
        }
    }
}

/// Eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (x, y) in ca.zip(cb) {
        let x: &[T; 8] = x.try_into().unwrap();
        let y: &[T; 8] = y.try_into().unwrap();
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    let mut cy = y.chunks_exact_mut(8);
    let mut cx = x.chunks_exact(8);
    for (yc, xc) in (&mut cy).zip(&mut cx) {
        let yc: &mut [T; 8] = yc.try_into().unwrap();
        let xc: &[T; 8] = xc.try_into().unwrap();
        for i in 0..8 {
            yc[i] += alpha * xc[i];
        }
    }
    for (yi, xi) in cy.into_remainder().iter_mut().zip(cx.remainder()) {
        *yi += alpha * *xi;
    }
}

fn grad_slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let numel = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); numel]))
}

fn rope_angles<T: Scalar>(positions: &[usize], dh: usize, base: f64) -> (Vec<T>, Vec<T>) {
    let half = dh / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / dh as f64);
            let theta = p as f64 * freq;
            cos.push(T::lit(theta.cos()));
            sin.push(T::lit(theta.sin()));
        }
    }
    (cos, sin)
}

/// Rotates consecutive pairs of each head; `sign` = -1 applies the inverse rotation.
fn rope_apply<T: Scalar>(data: &mut [T], rows: usize, n_heads: usize, dh: usize, cos: &[T], sin: &[T], sign: T) {
    let half = dh / 2;
    let d = n_heads * dh;
    for r in 0..rows {
        for h in 0..n_heads {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i] * sign);
                let j = r * d + h * dh + 2 * i;
                let (x0, x1) = (data[j], data[j + 1]);
                data[j] = x0 * c - x1 * s;
                data[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
    let node = &nodes[id];
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2()?;
            let n = bv.shape()[1];
            if let Some(da) = grad_slot(grads, nodes, *a) {
                // dA += dC · Bᵀ
                T::gemm(m, n, k, g, n as isize, 1, bv.data(), 1, n as isize, T::one(), da, k as isize, 1);
            }
            if let Some(db) = grad_slot(grads, nodes, *b) {
                // dB += Aᵀ · dC
                T::gemm(k, m, n, av.data(), 1, k as isize, g, n as isize, 1, T::one(), db, n as isize, 1);
            }
        }
        Op::Add { a, b } => {
            for x in [*a, *b] {
                if let Some(dx) = grad_slot(grads, nodes, x) {
                    axpy(T::one(), g, dx);
                }
            }
        }
        Op::AddRow { a, row } => {
            if let Some(da) = grad_slot(grads, nodes, *a) {
                axpy(T::one(), g, da);
            }
            if let Some(dr) = grad_slot(grads, nodes, *row) {
                let c = dr.len();
                for chunk in g.chunks(c) {
                    axpy(T::one(), chunk, dr);
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(da) = grad_slot(grads, nodes, *a) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(bv.data()) {
                    *d += *gi * *bi;
                }
            }
            if let Some(db) = grad_slot(grads, nodes, *b) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(av.data()) {
                    *d += *gi * *ai;
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(da) = grad_slot(grads, nodes, *a) {
                axpy(*s, g, da);
            }
        }
        Op::Transpose { a } => {
            let (r, c) = out.dims2()?;
            if let Some(da) = grad_slot(grads, nodes, *a) {
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            let d = out.shape()[1];
            if let Some(dt) = grad_slot(grads, nodes, *table) {
                for (t, &id) in ids.iter().enumerate() {
                    axpy(T::one(), &g[t * d..(t + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = nodes[*x].value.clone();
            let gv = nodes[*gain].value.clone();
            let d = gv.numel();
            if let Some(dg) = grad_slot(grads, nodes, *gain) {
                for (r, &inv) in inv_rms.iter().enumerate() {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xv.data()[r * d + j] * inv;
                    }
                }
            }
            if let Some(dx) = grad_slot(grads, nodes, *x) {
                let dn = T::lit(d as f64);
                for (r, &inv) in inv_rms.iter().enumerate() {
                    let xs = &xv.data()[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mut mean = T::zero();
                    for j in 0..d {
                        mean += gs[j] * gv.data()[j] * xs[j] * inv;
                    }
                    mean /= dn;
                    for j in 0..d {
                        let u = xs[j] * inv;
                        dx[r * d + j] += inv * (gs[j] * gv.data()[j] - u * mean);
                    }
                }
            }
        }
        Op::Silu { x } => {
            let xv = nodes[*x].value.clone();
            if let Some(dx) = grad_slot(grads, nodes, *x) {
                for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                    let s = T::one() / (T::one() + (-*xi).exp());
                    *d += *gi * s * (T::one() + *xi * (T::one() - s));
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis, "concat")?;
            let mut offset = 0;
            for &inp in inputs {
                let n = nodes[inp].value.shape()[*axis] * inner;
                if let Some(di) = grad_slot(grads, nodes, inp) {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..o * total * inner + offset + n];
                        axpy(T::one(), src, &mut di[o * n..(o + 1) * n]);
                    }
                }
                offset += n;
            }
        }
        Op::SliceRows { a, start } => {
            let cols = out.shape()[1];
            if let Some(da) = grad_slot(grads, nodes, *a) {
                axpy(T::one(), g, &mut da[start * cols..start * cols + g.len()]);
            }
        }
        Op::SelectRows { a, rows } => {
            let cols = out.shape()[1];
            if let Some(da) = grad_slot(grads, nodes, *a) {
                for (i, &r) in rows.iter().enumerate() {
                    axpy(T::one(), &g[i * cols..(i + 1) * cols], &mut da[r * cols..(r + 1) * cols]);
                }
            }
        }
        Op::ReplaceRows { base, values, rows } => {
            let cols = out.shape()[1];
            if let Some(dv) = grad_slot(grads, nodes, *values) {
                for (i, &r) in rows.iter().enumerate() {
                    axpy(T::one(), &g[r * cols..(r + 1) * cols], &mut dv[i * cols..(i + 1) * cols]);
                }
            }
            if let Some(db) = grad_slot(grads, nodes, *base) {
                let mut masked = g.to_vec();
                for &r in rows {
                    masked[r * cols..(r + 1) * cols].fill(T::zero());
                }
                axpy(T::one(), &masked, db);
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis, "softmax")?;
            if let Some(da) = grad_slot(grads, nodes, *a) {
                let y = out.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dotp = T::zero();
                        for j in 0..n {
                            dotp += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            da[idx] += y[idx] * (g[idx] - dotp);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if let Some(dl) = grad_slot(grads, nodes, *logits) {
                let v = probs.len() / targets.len();
                let scale = g[0] / T::lit(targets.len() as f64);
                for (t, &target) in targets.iter().enumerate() {
                    for j in 0..v {
                        let onehot = if j == target { T::one() } else { T::zero() };
                        dl[t * v + j] += scale * (probs[t * v + j] - onehot);
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(da) = grad_slot(grads, nodes, *a) {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Rope { x, positions, n_heads, base } => {
            if let Some(dx) = grad_slot(grads, nodes, *x) {
                let (rows, d) = out.dims2()?;
                let dh = d / n_heads;
                let (cos, sin) = rope_angles::<T>(positions, dh, *base);
                let mut back = g.to_vec();
                rope_apply(&mut back, rows, *n_heads, dh, &cos, &sin, -T::one());
                axpy(T::one(), &back, dx);
            }
        }
        Op::Attention(s) => {
            let (qv, kv, vv) = (nodes[s.q].value.clone(), nodes[s.k].value.clone(), nodes[s.v].value.clone());
            let (a_rows, d) = qv.dims2()?;
            let k_rows = kv.shape()[0];
            let nh = s.n_heads;
            let dh = d / nh;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let kh = to_head_major(kv.data(), k_rows, nh, dh);
            let vh = to_head_major(vv.data(), k_rows, nh, dh);
            let mut dq = vec![T::zero(); a_rows * d];
            let mut dkh = vec![T::zero(); k_rows * d];
            let mut dvh = vec![T::zero(); k_rows * d];
            let dims = AttnDims { k_rows, n_heads: nh, dh, scale };
            attn_backward(&dims, qv.data(), &kh, &vh, s, g, &mut dq, &mut dkh, &mut dvh);
            if let Some(dqs) = grad_slot(grads, nodes, s.q) {
                axpy(T::one(), &dq, dqs);
            }
            if let Some(dks) = grad_slot(grads, nodes, s.k) {
                from_head_major_add(&dkh, k_rows, nh, dh, dks);
            }
            if let Some(dvs) = grad_slot(grads, nodes, s.v) {
                from_head_major_add(&dvh, k_rows, nh, dh, dvs);
            }
        }
        Op::SegmentMax { x, argmax } => {
            let cols = out.shape()[1];
            if let Some(dx) = grad_slot(grads, nodes, *x) {
                for (i, &src_row) in argmax.iter().enumerate() {
                    let j = i % cols;
                    dx[src_row * cols + j] += g[i];
                }
            }
        }
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// ∂loss/∂self after `Tape::backward`; `None` if no gradient reached this node.
    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad(), name)
    }

    fn binary(&self, other: &Var<'t, T>, value: Tensor<T>, op: Op<T>, name: &'static str) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.same_tape(&other, "matmul")?;
        let out = self.value().matmul(&other.value())?;
        Ok(self.binary(&other, out, Op::MatMul { a: self.id, b: other.id }, "matmul"))
    }

    fn zip_with(&self, other: Var<'t, T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.tape.same_tape(&other, name)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(other, "add", |x, y| x + y)?;
        Ok(self.binary(&other, out, Op::Add { a: self.id, b: other.id }, "add"))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_with(other, "mul", |x, y| x * y)?;
        Ok(self.binary(&other, out, Op::Mul { a: self.id, b: other.id }, "mul"))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.same_tape(&row, "add_row")?;
        let (a, r) = (self.value(), row.value());
        let (_, cols) = a.dims2()?;
        if r.numel() != cols {
            return Err(Error::shape("add_row", format!("{:?} + row {:?}", a.shape(), r.shape())));
        }
        let data = a.data().chunks(cols).flat_map(|c| c.iter().zip(r.data()).map(|(x, y)| *x + *y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.binary(&row, out, Op::AddRow { a: self.id, row: row.id }, "add_row"))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let a = self.value();
        let out = Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| *x * s).collect()).expect("same shape");
        self.unary(out, Op::Scale { a: self.id, s }, "scale")
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let out = self.value().transpose()?;
        Ok(self.unary(out, Op::Transpose { a: self.id }, "transpose"))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&self, gain: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.same_tape(&gain, "rms_norm")?;
        let (x, gv) = (self.value(), gain.value());
        let (rows, d) = x.dims2()?;
        if gv.numel() != d {
            return Err(Error::shape("rms_norm", format!("gain {:?} for width {d}", gv.shape())));
        }
        let eps = T::lit(RMS_EPS);
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let xs = x.row(r);
            let ms = xs.iter().fold(T::zero(), |s, v| s + *v * *v) / T::lit(d as f64);
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(xs.iter().zip(gv.data()).map(|(v, g)| *v * inv * *g));
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.binary(&gain, out, Op::RmsNorm { x: self.id, gain: gain.id, inv_rms }, "rms_norm"))
    }

    pub fn silu(&self) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|v| *v / (T::one() + (-*v).exp())).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.unary(out, Op::Silu { x: self.id }, "silu")
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let a = self.value();
        let (rows, cols) = a.dims2()?;
        if start + len > rows {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
        }
        let out = Tensor::new(vec![len, cols], a.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.unary(out, Op::SliceRows { a: self.id, start }, "slice_rows"))
    }

    /// Gathers the listed rows (repeats allowed) into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        let (n, cols) = a.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("select_rows", format!("row {r} of {n}")));
            }
            data.extend_from_slice(a.row(r));
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.unary(out, Op::SelectRows { a: self.id, rows: rows.to_vec() }, "select_rows"))
    }

    /// Returns `self` with `rows[i]` overwritten by row `i` of `values`; rows must be distinct.
    pub fn replace_rows(&self, rows: &[usize], values: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.same_tape(&values, "replace_rows")?;
        let (base, vals) = (self.value(), values.value());
        let (n, cols) = base.dims2()?;
        if vals.shape() != [rows.len(), cols] || rows.iter().any(|&r| r >= n) {
            return Err(Error::shape("replace_rows", format!("{:?} into {:?}", vals.shape(), base.shape())));
        }
        let mut data = base.data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            data[r * cols..(r + 1) * cols].copy_from_slice(vals.row(i));
        }
        let out = Tensor::new(vec![n, cols], data)?;
        let op = Op::ReplaceRows { base: self.id, values: values.id, rows: rows.to_vec() };
        Ok(self.binary(&values, out, op, "replace_rows"))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let out = self.value().softmax(axis)?;
        Ok(self.unary(out, Op::Softmax { a: self.id, axis }, "softmax"))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `self`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t, T>> {
        let logits = self.value();
        let (rows, v) = logits.dims2()?;
        if rows != targets.len() || rows == 0 {
            return Err(Error::shape("cross_entropy", format!("{rows} logit rows for {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} outside vocab {v}")));
        }
        let probs = logits.softmax(1)?.into_data();
        let mut total = T::zero();
        for (t, &target) in targets.iter().enumerate() {
            let row = logits.row(t);
            let max = row.iter().fold(T::neg_infinity(), |m, x| m.max(*x));
            let lse = row.iter().fold(T::zero(), |s, x| s + (*x - max).exp()).ln() + max;
            total += lse - row[target];
        }
        let out = Tensor::scalar(total / T::lit(rows as f64));
        Ok(self.unary(out, Op::CrossEntropy { logits: self.id, targets: targets.to_vec(), probs }, "cross_entropy"))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(total), Op::Sum { a: self.id }, "sum")
    }

    /// Rotary position encoding applied per head at the given absolute positions.
    pub fn rope(&self, positions: &[usize], n_heads: usize, base: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, d) = x.dims2()?;
        if positions.len() != rows || n_heads == 0 || d % n_heads != 0 || !(d / n_heads).is_multiple_of(2) {
            return Err(Error::shape("rope", format!("{rows} rows, {} positions, width {d}, {n_heads} heads", positions.len())));
        }
        let dh = d / n_heads;
        let (cos, sin) = rope_angles::<T>(positions, dh, base);
        let mut data = x.data().to_vec();
        rope_apply(&mut data, rows, n_heads, dh, &cos, &sin, T::one());
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.unary(out, Op::Rope { x: self.id, positions: positions.to_vec(), n_heads, base }, "rope"))
    }

    /// Column-wise maximum over each contiguous row segment `[start, end)`.
    pub fn segment_max(&self, segments: &[(usize, usize)]) -> Result<Var<'t, T>> {
        let x = self.value();
        let (rows, cols) = x.dims2()?;
        let mut data = Vec::with_capacity(segments.len() * cols);
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for &(start, end) in segments {
            if start >= end || end > rows {
                return Err(Error::shape("segment_max", format!("segment {start}..{end} of {rows} rows")));
            }
            for j in 0..cols {
                let mut best = start;
                for r in start + 1..end {
                    if x.data()[r * cols + j] > x.data()[best * cols + j] {
                        best = r;
                    }
                }
                data.push(x.data()[best * cols + j]);
                argmax.push(best);
            }
        }
        let out = Tensor::new(vec![segments.len(), cols], data)?;
        Ok(self.unary(out, Op::SegmentMax { x: self.id, argmax }, "segment_max"))
    }
}
