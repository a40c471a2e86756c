//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation eagerly: values are computed when an
//! op is pushed, and [`Graph::backward`] walks the tape in reverse to
//! accumulate gradients. Parameters are borrowed from a [`ParamStore`]
//! rather than copied, so building a graph per sample is cheap.
//!
//! Ops are deliberately coarse (fused layer norm, multi-head attention,
//! weighted cross entropy) to keep the tape short.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gather { src: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    LeakyRelu(Var, T),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Sum(Var),
    MseMean { x: Var, target: Vec<T> },
    CrossEntropy { logits: Var, rows: Vec<usize>, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
}

pub struct Graph<'p, T> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<'p, T: Real> Graph<'p, T> {
    /// A graph over `params`. With `record = false` the graph still evaluates
    /// but refuses to run [`Graph::backward`].
    pub fn new(params: &'p ParamStore<T>, record: bool) -> Self {
        Self { params: Some(params), nodes: Vec::new(), record }
    }

    /// A graph with no parameter store, for constant-only computations.
    pub fn detached(record: bool) -> Self {
        Self { params: None, nodes: Vec::new(), record }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Parameters read so far, in first-use order without repeats.
    pub fn params_used(&self) -> Vec<ParamId> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            if let Value::Param(id) = n.value {
                if !seen.contains(&id) {
                    seen.push(id);
                }
            }
        }
        seen
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without store").get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        assert!(self.params.is_some(), "graph has no parameter store");
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = Tensor::zeros(m, n);
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out.data, m, k, n);
        self.push(out, Op::MatMul(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows, ta.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let ta = self.value(a);
        let tr = self.value(row);
        assert_eq!((1, ta.cols), tr.shape(), "row broadcast shape");
        let mut out = ta.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&tr.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `out[i] = src[idx[i]]` on flattened storage, reshaped to `rows×cols`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(idx.len(), rows * cols, "gather shape");
        let s = &self.value(src).data;
        let data = idx.iter().map(|&i| s[i]).collect();
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather { src, idx })
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Var {
        let cols = self.shape(src).1;
        let idx = (start * cols..end * cols).collect();
        self.gather(src, idx, end - start, cols)
    }

    pub fn reshape(&mut self, src: Var, rows: usize, cols: usize) -> Var {
        let n = rows * cols;
        assert_eq!(self.value(src).len(), n, "reshape size");
        self.gather(src, (0..n).collect(), rows, cols)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat column count");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::Concat(parts.to_vec()))
    }

    /// Row-wise layer normalization followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let tx = self.value(x);
        let (rows, cols) = tx.shape();
        let (tg, tb) = (self.value(gain), self.value(bias));
        assert_eq!(tg.shape(), (1, cols));
        assert_eq!(tb.shape(), (1, cols));
        let n = T::of(cols as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * tg.data[c] + tb.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_vec(t.rows, t.cols, data);
        self.push(out, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let t = self.value(x);
        let data = t.data.iter().map(|&v| if v > T::zero() { v } else { slope * v }).collect();
        let out = Tensor::from_vec(t.rows, t.cols, data);
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Multi-head scaled dot-product attention without masking.
    /// `q`, `k`, `v` are `n×width`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (n, w) = self.shape(q);
        assert_eq!(self.shape(k), (n, w));
        assert_eq!(self.shape(v), (n, w));
        assert_eq!(w % heads, 0, "width divisible by heads");
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = Tensor::zeros(n, w);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        let mut oh = vec![T::zero(); n * dh];
        for h in 0..heads {
            split_head(&tq.data, &mut qh, n, w, h, dh);
            split_head(&tk.data, &mut kh, n, w, h, dh);
            split_head(&tv.data, &mut vh, n, w, h, dh);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm_nt(&qh, &kh, p, n, dh, n);
            for r in 0..n {
                softmax_in_place(&mut p[r * n..(r + 1) * n], scale);
            }
            oh.iter_mut().for_each(|x| *x = T::zero());
            gemm_nn(p, &vh, &mut oh, n, n, dh);
            merge_head(&oh, &mut out.data, n, w, h, dh);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of squared differences against a constant target.
    pub fn mse_mean(&mut self, x: Var, target: Vec<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), target.len(), "mse target length");
        let n = T::of(t.len() as f64);
        let s = t.data.iter().zip(&target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::MseMean { x, target })
    }

    /// `Σ_j weights[j] · (−log softmax(logits[rows[j]])[targets[j]])`.
    pub fn cross_entropy(&mut self, logits: Var, rows: Vec<usize>, targets: Vec<usize>, weights: Vec<T>) -> Var {
        assert_eq!(rows.len(), targets.len());
        assert_eq!(rows.len(), weights.len());
        let t = self.value(logits);
        let v = t.cols;
        let mut probs = vec![T::zero(); rows.len() * v];
        let mut total = T::zero();
        for (j, (&r, (&y, &w))) in rows.iter().zip(targets.iter().zip(&weights)).enumerate() {
            let row = t.row(r);
            let p = &mut probs[j * v..(j + 1) * v];
            p.copy_from_slice(row);
            let lse = log_sum_exp(row);
            softmax_in_place(p, T::one());
            total += w * (lse - row[y]);
        }
        self.push(Tensor::scalar(total), Op::CrossEntropy { logits, rows, targets, weights, probs })
    }

    /// Reverse sweep from a scalar node. Parameters the loss never reaches get `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.sweep(loss, &[]).map(|(g, _)| g)
    }

    /// Gradient of `loss` with respect to arbitrary nodes (zeros when unreached).
    pub fn gradients_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        self.sweep(loss, wrt).map(|(_, g)| g)
    }

    fn sweep(&self, loss: Var, keep: &[Var]) -> Result<(Gradients<T>, Vec<Tensor<T>>)> {
        if !self.record {
            return Err(Error::Usage("backward called on a graph that was not recorded".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage("backward requires a scalar loss".into()));
        }
        let store = self.params.map(ParamStore::len).unwrap_or(0);
        let mut out = Gradients::empty(store);
        let mut kept: Vec<Tensor<T>> = keep
            .iter()
            .map(|&v| {
                let (r, c) = self.shape(v);
                Tensor::zeros(r, c)
            })
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            for (slot, v) in kept.iter_mut().zip(keep) {
                if v.0 == i {
                    slot.add_assign(&gy);
                }
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, &gy),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    let mut ga = Tensor::zeros(m, k);
                    gemm_nt(&gy.data, &tb.data, &mut ga.data, m, n, k);
                    let mut gb = Tensor::zeros(k, n);
                    gemm_tn(&ta.data, &gy.data, &mut gb.data, m, k, n);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    let mut neg = gy.clone();
                    neg.scale_assign(-T::one());
                    acc(&mut grads, *a, gy);
                    acc(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ga = elementwise(&gy, tb, |g, y| g * y);
                    let gb = elementwise(&gy, ta, |g, x| g * x);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, gy.cols);
                    for r in 0..gy.rows {
                        for (o, &g) in gr.data.iter_mut().zip(gy.row(r)) {
                            *o += g;
                        }
                    }
                    acc(&mut grads, *a, gy);
                    acc(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => {
                    let mut g = gy;
                    g.scale_assign(*s);
                    acc(&mut grads, *a, g);
                }
                Op::Gather { src, idx } => {
                    let ts = self.value(*src);
                    let mut g = Tensor::zeros(ts.rows, ts.cols);
                    for (o, &j) in idx.iter().enumerate() {
                        g.data[j] += gy.data[o];
                    }
                    acc(&mut grads, *src, g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let g = Tensor::from_vec(r, c, gy.data[offset..offset + r * c].to_vec());
                        offset += r * c;
                        acc(&mut grads, p, g);
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (rows, cols) = gy.shape();
                    let tg = self.value(*gain);
                    let n = T::of(cols as f64);
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    let mut dxh = vec![T::zero(); cols];
                    for r in 0..rows {
                        let gyr = gy.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gg.data[c] += gyr[c] * xh[c];
                            gb.data[c] += gyr[c];
                            dxh[c] = gyr[c] * tg.data[c];
                        }
                        let mean_d = dxh.iter().copied().sum::<T>() / n;
                        let mean_dx = dot(&dxh, xh) / n;
                        let gxr = gx.row_mut(r);
                        for c in 0..cols {
                            gxr[c] = rstd[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gain, gg);
                    acc(&mut grads, *bias, gb);
                }
                Op::Gelu(x) => {
                    let g = elementwise(&gy, self.value(*x), |g, v| g * gelu_grad(v));
                    acc(&mut grads, *x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let g = elementwise(&gy, self.value(*x), |g, v| if v > T::zero() { g } else { g * s });
                    acc(&mut grads, *x, g);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (gq, gk, gv) = self.attention_backward(&gy, *q, *k, *v, *heads, probs);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut grads, *x, Tensor::filled(r, c, gy.data[0]));
                }
                Op::MseMean { x, target } => {
                    let tx = self.value(*x);
                    let coef = gy.data[0] * T::of(2.0) / T::of(tx.len() as f64);
                    let data = tx.data.iter().zip(target).map(|(&a, &b)| coef * (a - b)).collect();
                    acc(&mut grads, *x, Tensor::from_vec(tx.rows, tx.cols, data));
                }
                Op::CrossEntropy { logits, rows, targets, weights, probs } => {
                    let tl = self.value(*logits);
                    let v = tl.cols;
                    let mut g = Tensor::zeros(tl.rows, v);
                    for (j, (&r, (&y, &w))) in rows.iter().zip(targets.iter().zip(weights)).enumerate() {
                        let coef = gy.data[0] * w;
                        let p = &probs[j * v..(j + 1) * v];
                        let gr = g.row_mut(r);
                        for c in 0..v {
                            gr[c] += coef * p[c];
                        }
                        gr[y] -= coef;
                    }
                    acc(&mut grads, *logits, g);
                }
            }
        }
        Ok((out, kept))
    }

    fn attention_backward(
        &self,
        gy: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (n, w) = self.shape(q);
        let dh = w / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = Tensor::zeros(n, w);
        let mut gk = Tensor::zeros(n, w);
        let mut gv = Tensor::zeros(n, w);
        let mut qh = vec![T::zero(); n * dh];
        let mut kh = vec![T::zero(); n * dh];
        let mut vh = vec![T::zero(); n * dh];
        let mut goh = vec![T::zero(); n * dh];
        let mut dp = vec![T::zero(); n * n];
        let mut buf = vec![T::zero(); n * dh];
        for h in 0..heads {
            split_head(&tq.data, &mut qh, n, w, h, dh);
            split_head(&tk.data, &mut kh, n, w, h, dh);
            split_head(&tv.data, &mut vh, n, w, h, dh);
            split_head(&gy.data, &mut goh, n, w, h, dh);
            let p = &probs[h * n * n..(h + 1) * n * n];

            buf.iter_mut().for_each(|x| *x = T::zero());
            gemm_tn(p, &goh, &mut buf, n, n, dh);
            merge_head(&buf, &mut gv.data, n, w, h, dh);

            dp.iter_mut().for_each(|x| *x = T::zero());
            gemm_nt(&goh, &vh, &mut dp, n, dh, n);
            for r in 0..n {
                let pr = &p[r * n..(r + 1) * n];
                let dr = &mut dp[r * n..(r + 1) * n];
                let inner = dot(pr, dr);
                for c in 0..n {
                    dr[c] = pr[c] * (dr[c] - inner) * scale;
                }
            }

            buf.iter_mut().for_each(|x| *x = T::zero());
            gemm_nn(&dp, &kh, &mut buf, n, n, dh);
            merge_head(&buf, &mut gq.data, n, w, h, dh);

            buf.iter_mut().for_each(|x| *x = T::zero());
            gemm_tn(&dp, &qh, &mut buf, n, n, dh);
            merge_head(&buf, &mut gk.data, n, w, h, dh);
        }
        (gq, gk, gv)
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows, a.cols, data)
}

fn split_head<T: Real>(src: &[T], dst: &mut [T], n: usize, w: usize, h: usize, dh: usize) {
    for r in 0..n {
        dst[r * dh..(r + 1) * dh].copy_from_slice(&src[r * w + h * dh..r * w + (h + 1) * dh]);
    }
}

fn merge_head<T: Real>(src: &[T], dst: &mut [T], n: usize, w: usize, h: usize, dh: usize) {
    for r in 0..n {
        let d = &mut dst[r * w + h * dh..r * w + (h + 1) * dh];
        for (o, &s) in d.iter_mut().zip(&src[r * dh..(r + 1) * dh]) {
            *o += s;
        }
    }
}

/// In-place `softmax(scale · x)`.
pub fn softmax_in_place<T: Real>(x: &mut [T], scale: T) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in x.iter_mut() {
        *v = ((*v - max) * scale).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v = *v / total;
    }
}

pub fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks every input element of a graph-building closure against central differences.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) {
        let eval = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::detached(false);
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::detached(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        let analytic = g.gradients_wrt(out, &vars).unwrap();
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data[j] += h;
                let mut minus = inputs.clone();
                minus[i].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[i].data[j];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!((a - fd).abs() / denom < 1e-5, "input {i}[{j}]: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn params_used_lists_each_read_once() {
        let mut map = std::collections::BTreeMap::new();
        for name in ["a", "b", "c"] {
            map.insert(name.to_string(), Tensor::<f64>::zeros(1, 2));
        }
        let store = ParamStore::from_map(map);
        let mut g = Graph::new(&store, false);
        let c = g.param(ParamId(2));
        let a = g.param(ParamId(0));
        let again = g.param(ParamId(2));
        let s = g.add(c, a);
        g.add(s, again);
        assert_eq!(g.params_used(), vec![ParamId(2), ParamId(0)]);
    }

    #[test]
    fn matmul_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 5);
        let c = rand_tensor(&mut rng, 3, 5);
        check(vec![a, b, c], |g, v| {
            let p = g.matmul(v[0], v[1]);
            let q = g.mul(p, v[2]);
            let r = g.sub(q, v[2]);
            let s = g.add(r, p);
            g.sum(s)
        });
    }

    #[test]
    fn layer_norm_gelu_leaky_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 4, 6);
        let gain = rand_tensor(&mut rng, 1, 6);
        let bias = rand_tensor(&mut rng, 1, 6);
        let w = rand_tensor(&mut rng, 4, 6);
        check(vec![x, gain, bias, w], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let y = g.gelu(y);
            let y = g.leaky_relu(y, 0.01);
            let y = g.add_row(y, v[1]);
            let y = g.mul(y, v[3]);
            g.sum(y)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, 5, 8);
        let k = rand_tensor(&mut rng, 5, 8);
        let v = rand_tensor(&mut rng, 5, 8);
        let w = rand_tensor(&mut rng, 5, 8);
        check(vec![q, k, v, w], |g, x| {
            let o = g.attention(x[0], x[1], x[2], 2);
            let o = g.mul(o, x[3]);
            g.sum(o)
        });
    }

    #[test]
    fn gather_concat_mse_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, 2, 6);
        let b = rand_tensor(&mut rng, 3, 6);
        check(vec![a, b], |g, x| {
            let c = g.concat_rows(&[x[0], x[1]]);
            let s = g.slice_rows(c, 1, 4);
            let r = g.gather(s, vec![17, 0, 3, 3, 9, 12], 2, 3);
            let m = g.mse_mean(r, vec![0.5, -0.2, 0.1, 0.0, 0.3, 0.9]);
            let ce = g.cross_entropy(c, vec![0, 2, 4], vec![1, 5, 0], vec![0.5, 1.0, 2.0]);
            let l = g.add(m, ce);
            g.scale(l, 3.0)
        });
    }

    #[test]
    fn backward_requires_recording() {
        let mut g: Graph<'_, f64> = Graph::detached(false);
        let a = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(a), Err(Error::Usage(_))));
    }
}
