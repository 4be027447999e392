//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that needs one.
//! Nodes created with [`Graph::constant`] never receive gradients, and any
//! operation whose inputs are all constant is itself constant.

use super::scalar::{gemm, MatMut, MatRef, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::masking::AttentionMask;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
        heads: usize,
        scale: T,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    BroadcastRows(Var),
    MeanRows(Var),
    Mean(Var),
    Sum(Var),
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10000.0;

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), what)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds the `1 x n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        let rv = self.value(r);
        if rv.len() != cols {
            return Err(Error::Shape(format!(
                "add_row: {cols} columns vs row of {}",
                rv.len()
            )));
        }
        let mut out = self.value(a).clone();
        let rd = rv.data().to_vec();
        for i in 0..rows {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rd) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(out, Op::AddRow(a, r), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::real(c);
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::real(c);
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let ng = self.ng(a);
        self.push(out, Op::Abs(a), ng)
    }

    /// `log(sigmoid(x))`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let m = (-x).max(T::zero());
            -(m + ((-m).exp() + (-x - m).exp()).ln())
        });
        let ng = self.ng(a);
        self.push(out, Op::LogSigmoid(a), ng)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let n = T::from_usize(cols).unwrap();
        let eps = T::real(LN_EPS);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = out.row_mut(i);
            let mut mean = T::zero();
            for &v in r.iter() {
                mean += v;
            }
            mean /= n;
            let mut var = T::zero();
            for &v in r.iter() {
                var += (v - mean) * (v - mean);
            }
            var /= n;
            let is = T::one() / (var + eps).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, ng)
    }

    /// Rotary position embedding on each head's adjacent channel pairs,
    /// angle `pos * 10000^(-2p / head_dim)` for pair `p`.
    pub fn rope(&mut self, a: Var, positions: &[usize], heads: usize) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if positions.len() != rows {
            return Err(Error::Shape(format!(
                "rope: {rows} rows, {} positions",
                positions.len()
            )));
        }
        if heads == 0 || cols % heads != 0 || (cols / heads) % 2 != 0 {
            return Err(Error::Shape(format!(
                "rope: width {cols} not divisible into {heads} even-sized heads"
            )));
        }
        let dh = cols / heads;
        let half = dh / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for k in 0..half {
                let freq = ROPE_BASE.powf(-2.0 * k as f64 / dh as f64);
                let ang = p as f64 * freq;
                cos.push(T::real(ang.cos()));
                sin.push(T::real(ang.sin()));
            }
        }
        let mut out = self.value(a).clone();
        rotate(&mut out, &cos, &sin, heads, false);
        let ng = self.ng(a);
        Ok(self.push(
            out,
            Op::Rope {
                x: a,
                cos,
                sin,
                heads,
            },
            ng,
        ))
    }

    /// Multi-head scaled dot-product attention with a boolean mask.
    ///
    /// `q` is `N x h`, `k` and `v` are `Nk x h`; masked scores are excluded
    /// from the softmax. Rows of the mask must each admit at least one key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, heads: usize) -> Result<Var> {
        let (nq, h) = self.shape(q);
        let (nk, hk) = self.shape(k);
        let (nv, hv) = self.shape(v);
        if hk != h || hv != h || nv != nk {
            return Err(Error::Shape(format!(
                "attention: q {nq}x{h}, k {nk}x{hk}, v {nv}x{hv}"
            )));
        }
        if heads == 0 || h % heads != 0 {
            return Err(Error::Shape(format!("attention: width {h} vs {heads} heads")));
        }
        if mask.rows() != nq || mask.cols() != nk {
            return Err(Error::Shape(format!(
                "attention: mask {}x{} for scores {nq}x{nk}",
                mask.rows(),
                mask.cols()
            )));
        }
        if let Some(row) = mask.first_empty_row() {
            return Err(Error::FullyMaskedRow { row });
        }
        let dh = h / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * h];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            for hh in 0..heads {
                let c0 = hh * dh;
                let p = &mut probs[hh * nq * nk..(hh + 1) * nq * nk];
                gemm(
                    scale,
                    MatRef::cols_of(qd, nq, h, c0, dh),
                    MatRef::cols_of(kd, nk, h, c0, dh).t(),
                    T::zero(),
                    MatMut::dense(p, nq, nk),
                );
                masked_softmax_rows(p, nq, nk, mask);
                gemm(
                    T::one(),
                    MatRef::dense(p, nq, nk),
                    MatRef::cols_of(vd, nk, h, c0, dh),
                    T::zero(),
                    MatMut::cols_of(&mut out, nq, h, c0, dh),
                );
            }
        }
        let out = Tensor::from_matrix(nq, h, out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                heads,
                scale,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (_, cols) = self.shape(a);
        if start + len > cols {
            return Err(Error::Shape(format!(
                "slice_cols {start}+{len} of {cols}"
            )));
        }
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, _) = self.shape(a);
        if start + len > rows {
            return Err(Error::Shape(format!(
                "slice_rows {start}+{len} of {rows}"
            )));
        }
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    /// Repeats a `1 x n` row `rows` times.
    pub fn broadcast_rows(&mut self, r: Var, rows: usize) -> Var {
        let rv = self.value(r);
        let n = rv.len();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(rv.data());
        }
        let out = Tensor::from_matrix(rows, n, data).expect("broadcast shape");
        let ng = self.ng(r);
        self.push(out, Op::BroadcastRows(r), ng)
    }

    /// Column means, `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let mut acc = vec![T::zero(); cols];
        for i in 0..rows {
            for (s, &v) in acc.iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
        for s in &mut acc {
            *s *= inv;
        }
        let out = Tensor::from_matrix(1, cols, acc).expect("mean_rows shape");
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// `x W + b` for a row-major `in x out` weight.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.mean(d2))
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => {
                    for (a, b) in e.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(
                        T::one(),
                        MatRef::dense(g.data(), m, n),
                        MatRef::dense(bv.data(), k, n).t(),
                        T::zero(),
                        MatMut::dense(&mut da, m, k),
                    );
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(
                        T::one(),
                        MatRef::dense(av.data(), m, k).t(),
                        MatRef::dense(g.data(), m, n),
                        T::zero(),
                        MatMut::dense(&mut db, k, n),
                    );
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.ng(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y).unwrap());
                }
                if self.ng(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y).unwrap());
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if self.ng(*r) {
                    let rv = self.value(*r);
                    let mut dr = vec![T::zero(); g.cols()];
                    for i in 0..g.rows() {
                        for (s, &x) in dr.iter_mut().zip(g.row(i)) {
                            *s += x;
                        }
                    }
                    acc(*r, Tensor::new(rv.shape().to_vec(), dr).unwrap());
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(*a, g.map(|x| x * c));
            }
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Silu(a) => {
                let xv = self.value(*a);
                acc(
                    *a,
                    g.zip_map(xv, |gi, x| {
                        let s = sigmoid(x);
                        gi * s * (T::one() + x * (T::one() - s))
                    })
                    .unwrap(),
                );
            }
            Op::Tanh(a) => {
                acc(*a, g.zip_map(&node.value, |gi, y| gi * (T::one() - y * y)).unwrap());
            }
            Op::Abs(a) => {
                let xv = self.value(*a);
                acc(
                    *a,
                    g.zip_map(xv, |gi, x| {
                        if x > T::zero() {
                            gi
                        } else if x < T::zero() {
                            -gi
                        } else {
                            T::zero()
                        }
                    })
                    .unwrap(),
                );
            }
            Op::LogSigmoid(a) => {
                let xv = self.value(*a);
                acc(*a, g.zip_map(xv, |gi, x| gi * sigmoid(-x)).unwrap());
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let cols = y.cols();
                let n = T::from_usize(cols).unwrap();
                let mut dx = g.clone();
                for (i, &is) in inv_std.iter().enumerate() {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let mut mg = T::zero();
                    let mut mgy = T::zero();
                    for c in 0..cols {
                        mg += gr[c];
                        mgy += gr[c] * yr[c];
                    }
                    mg /= n;
                    mgy /= n;
                    let dr = dx.row_mut(i);
                    for c in 0..cols {
                        dr[c] = is * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                acc(*x, dx);
            }
            Op::Rope { x, cos, sin, heads } => {
                let mut dx = g.clone();
                rotate(&mut dx, cos, sin, *heads, true);
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                heads,
                scale,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (nq, h) = (qv.rows(), qv.cols());
                let nk = kv.rows();
                let dh = h / heads;
                let mut dq = vec![T::zero(); nq * h];
                let mut dk = vec![T::zero(); nk * h];
                let mut dv = vec![T::zero(); nk * h];
                let mut dp = vec![T::zero(); nq * nk];
                for hh in 0..*heads {
                    let c0 = hh * dh;
                    let p = &probs[hh * nq * nk..(hh + 1) * nq * nk];
                    gemm(
                        T::one(),
                        MatRef::dense(p, nq, nk).t(),
                        MatRef::cols_of(g.data(), nq, h, c0, dh),
                        T::zero(),
                        MatMut::cols_of(&mut dv, nk, h, c0, dh),
                    );
                    gemm(
                        T::one(),
                        MatRef::cols_of(g.data(), nq, h, c0, dh),
                        MatRef::cols_of(vv.data(), nk, h, c0, dh).t(),
                        T::zero(),
                        MatMut::dense(&mut dp, nq, nk),
                    );
                    for i in 0..nq {
                        let pr = &p[i * nk..(i + 1) * nk];
                        let dr = &mut dp[i * nk..(i + 1) * nk];
                        let mut dot = T::zero();
                        for j in 0..nk {
                            dot += pr[j] * dr[j];
                        }
                        for j in 0..nk {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    gemm(
                        *scale,
                        MatRef::dense(&dp, nq, nk),
                        MatRef::cols_of(kv.data(), nk, h, c0, dh),
                        T::zero(),
                        MatMut::cols_of(&mut dq, nq, h, c0, dh),
                    );
                    gemm(
                        *scale,
                        MatRef::dense(&dp, nq, nk).t(),
                        MatRef::cols_of(qv.data(), nq, h, c0, dh),
                        T::zero(),
                        MatMut::cols_of(&mut dk, nk, h, c0, dh),
                    );
                }
                acc(*q, Tensor::from_matrix(nq, h, dq).unwrap());
                acc(*k, Tensor::from_matrix(nk, h, dk).unwrap());
                acc(*v, Tensor::from_matrix(nk, h, dv).unwrap());
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        acc(p, g.slice_cols(c0, w));
                    }
                    c0 += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(&[av.rows(), av.cols()]);
                    let w = g.cols();
                    for i in 0..g.rows() {
                        da.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.ng(p) {
                        acc(p, g.slice_rows(r0, r));
                    }
                    r0 += r;
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut da = Tensor::zeros(&[av.rows(), cols]);
                    da.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    acc(*a, da);
                }
            }
            Op::BroadcastRows(r) => {
                let rv = self.value(*r);
                let mut dr = vec![T::zero(); g.cols()];
                for i in 0..g.rows() {
                    for (s, &x) in dr.iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                acc(*r, Tensor::new(rv.shape().to_vec(), dr).unwrap());
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let rows = av.rows();
                let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
                let mut da = Tensor::zeros(&[rows, av.cols()]);
                for i in 0..rows {
                    for (d, &x) in da.row_mut(i).iter_mut().zip(g.data()) {
                        *d = x * inv;
                    }
                }
                acc(*a, da);
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.item() / T::from_usize(av.len().max(1)).unwrap();
                acc(*a, Tensor::full(av.shape(), s));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                acc(*a, Tensor::full(av.shape(), g.item()));
            }
        }
    }
}

fn masked_softmax_rows<T: Real>(p: &mut [T], nq: usize, nk: usize, mask: &AttentionMask) {
    for i in 0..nq {
        let row = &mut p[i * nk..(i + 1) * nk];
        let allowed = mask.row(i);
        let mut mx = T::neg_infinity();
        for j in 0..nk {
            if allowed[j] && row[j] > mx {
                mx = row[j];
            }
        }
        let mut s = T::zero();
        for j in 0..nk {
            if allowed[j] {
                let e = (row[j] - mx).exp();
                row[j] = e;
                s += e;
            } else {
                row[j] = T::zero();
            }
        }
        let inv = T::one() / s;
        for x in row.iter_mut() {
            *x *= inv;
        }
    }
}

fn rotate<T: Real>(x: &mut Tensor<T>, cos: &[T], sin: &[T], heads: usize, inverse: bool) {
    let cols = x.cols();
    let dh = cols / heads;
    let half = dh / 2;
    for i in 0..x.rows() {
        let cs = &cos[i * half..(i + 1) * half];
        let sn = &sin[i * half..(i + 1) * half];
        let r = x.row_mut(i);
        for hh in 0..heads {
            let base = hh * dh;
            for k in 0..half {
                let (c, s) = (cs[k], if inverse { -sn[k] } else { sn[k] });
                let a = r[base + 2 * k];
                let b = r[base + 2 * k + 1];
                r[base + 2 * k] = a * c - b * s;
                r[base + 2 * k + 1] = a * s + b * c;
            }
        }
    }
}
