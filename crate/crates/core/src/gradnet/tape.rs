use std::sync::atomic::{AtomicU64, Ordering};

use super::network::ParamStore;
use super::tensor::{axpy, dot};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    Conv2d { x: usize, w: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Relu(usize),
    Dropout { x: usize, mask: Vec<T> },
    Reshape(usize),
    SliceRows { x: usize, start: usize },
    LogSoftmax(usize),
    Softmax(usize),
    MatMul { a: usize, b: usize },
    MatMulBt { a: usize, b: usize },
    NormalizeRows { x: usize, norms: Vec<T> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst { x: usize, c: Vec<T> },
    Scale(usize, T),
    AddScalar(usize),
    Log(usize),
    ClampMin(usize, T),
    Abs(usize),
    Powf(usize, T),
    Sum(usize),
    SumRows(usize),
    Pick { x: usize, idx: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "constant",
            Op::Param(_) => "parameter",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
            Op::SliceRows { .. } => "slice_rows",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Softmax(_) => "softmax",
            Op::MatMul { .. } => "matmul",
            Op::MatMulBt { .. } => "matmul_bt",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Log(_) => "log",
            Op::ClampMin(..) => "clamp_min",
            Op::Abs(_) => "abs",
            Op::Powf(..) => "powf",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::Pick { .. } => "pick",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            tensors: store.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Shape mismatches inside an op are programming errors and panic; the first
/// op that produces a non-finite value is remembered and reported by
/// [`Tape::backward`].
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<String>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.check(v)].value
    }

    fn check(&self, v: Var) -> usize {
        assert!(v.tape == self.id && v.idx < self.nodes.len(), "Var from another tape");
        v.idx
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name().to_string());
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var { idx: self.nodes.len() - 1, tape: self.id }
    }

    fn ng(&self, idxs: &[usize]) -> bool {
        idxs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record parameter `id` of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Valid (unpadded) stride-1 convolution.
    /// `x: [B, C, H, W]`, `w: [F, C, KH, KW]`, `b: [F]` → `[B, F, H-KH+1, W-KW+1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xi, wi, bi) = (self.check(x), self.check(w), self.check(b));
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1], "conv2d shapes {xs:?} {ws:?}");
        let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(h >= kh && wd >= kw, "conv2d kernel larger than input");
        assert_eq!(self.nodes[bi].value.len(), f);
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let xd = self.nodes[xi].value.data();
        let wdat = self.nodes[wi].value.data();
        let bd = self.nodes[bi].value.data();
        let mut y = vec![T::zero(); bsz * f * oh * ow];
        for n in 0..bsz {
            for fi in 0..f {
                let ybase = (n * f + fi) * oh * ow;
                y[ybase..ybase + oh * ow].fill(bd[fi]);
                for ci in 0..c {
                    for a in 0..kh {
                        for e in 0..kw {
                            let wv = wdat[((fi * c + ci) * kh + a) * kw + e];
                            for r in 0..oh {
                                let xo = ((n * c + ci) * h + r + a) * wd + e;
                                let yo = ybase + r * ow;
                                axpy(wv, &xd[xo..xo + ow], &mut y[yo..yo + ow]);
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[xi, wi, bi]);
        self.push(
            Tensor::new(vec![bsz, f, oh, ow], y).expect("conv2d output"),
            Op::Conv2d { x: xi, w: wi, b: bi },
            ng,
        )
    }

    /// `x: [B, D]`, `w: [O, D]`, `b: [O]` → `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xi, wi, bi) = (self.check(x), self.check(w), self.check(b));
        let (xs, ws) = (self.nodes[xi].value.shape(), self.nodes[wi].value.shape());
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shapes {xs:?} {ws:?}");
        let (bsz, d, o) = (xs[0], xs[1], ws[0]);
        assert_eq!(self.nodes[bi].value.len(), o);
        let xd = self.nodes[xi].value.data();
        let wdat = self.nodes[wi].value.data();
        let bd = self.nodes[bi].value.data();
        let mut y = Vec::with_capacity(bsz * o);
        for n in 0..bsz {
            let xr = &xd[n * d..(n + 1) * d];
            for k in 0..o {
                y.push(dot(xr, &wdat[k * d..(k + 1) * d]) + bd[k]);
            }
        }
        let ng = self.ng(&[xi, wi, bi]);
        self.push(Tensor::new(vec![bsz, o], y).unwrap(), Op::Linear { x: xi, w: wi, b: bi }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let y = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let out = Tensor::new(t.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::Relu(xi), ng)
    }

    /// Inverted dropout with a caller-supplied keep mask already scaled by `1/(1-p)`.
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        assert_eq!(mask.len(), t.len());
        let y = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::Dropout { x: xi, mask }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xi = self.check(x);
        let out = self.nodes[xi].value.clone().reshaped(shape).expect("reshape");
        let ng = self.ng(&[xi]);
        self.push(out, Op::Reshape(xi), ng)
    }

    /// Rows `start..end` of a tensor viewed as `[rows, rest]`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        assert!(start <= end && end <= t.rows(), "slice_rows out of range");
        let cols = t.len() / t.rows().max(1);
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::new(shape, t.data()[start * cols..end * cols].to_vec()).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::SliceRows { x: xi, start }, ng)
    }

    /// Row-wise log-softmax over the last axis of a `[B, N]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let n = *t.shape().last().expect("log_softmax of scalar");
        let mut y = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            y.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::LogSoftmax(xi), ng)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let n = *t.shape().last().expect("softmax of scalar");
        let mut y = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = y.len();
            y.extend(row.iter().map(|&v| (v - m).exp()));
            let s: T = y[start..].iter().copied().sum();
            y[start..].iter_mut().for_each(|v| *v = *v / s);
        }
        let out = Tensor::new(t.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::Softmax(xi), ng)
    }

    /// `a: [M, K]`, `b: [K, N]` → `[M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (m, k) = (at.shape()[0], at.shape()[1]);
        assert_eq!(bt.shape()[0], k, "matmul inner dimension");
        let n = bt.shape()[1];
        let mut y = vec![T::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = at.data()[i * k + kk];
                axpy(av, &bt.data()[kk * n..(kk + 1) * n], &mut y[i * n..(i + 1) * n]);
            }
        }
        let ng = self.ng(&[ai, bi]);
        self.push(Tensor::new(vec![m, n], y).unwrap(), Op::MatMul { a: ai, b: bi }, ng)
    }

    /// `a: [M, K]`, `b: [N, K]` → `a bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (m, k) = (at.shape()[0], at.shape()[1]);
        assert_eq!(bt.shape()[1], k, "matmul_bt inner dimension");
        let n = bt.shape()[0];
        let mut y = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                y.push(dot(&at.data()[i * k..(i + 1) * k], &bt.data()[j * k..(j + 1) * k]));
            }
        }
        let ng = self.ng(&[ai, bi]);
        self.push(Tensor::new(vec![m, n], y).unwrap(), Op::MatMulBt { a: ai, b: bi }, ng)
    }

    /// Scale each row of `[B, F]` to unit L2 norm. Norms are floored at 1e-12.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let f = t.shape()[1];
        let floor = T::of(1e-12);
        let mut norms = Vec::with_capacity(t.rows());
        let mut y = Vec::with_capacity(t.len());
        for row in t.data().chunks(f) {
            let nrm = dot(row, row).sqrt().max(floor);
            norms.push(nrm);
            y.extend(row.iter().map(|&v| v / nrm));
        }
        let out = Tensor::new(t.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::NormalizeRows { x: xi, norms }, ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (ai, bi) = (self.check(a), self.check(b));
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        assert_eq!(at.shape(), bt.shape(), "elementwise shapes differ");
        let y = at.data().iter().zip(bt.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(at.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[ai, bi]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Add(self.check(a), self.check(b));
        self.zip_with(a, b, |p, q| p + q, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Sub(self.check(a), self.check(b));
        self.zip_with(a, b, |p, q| p - q, op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let op = Op::Mul(self.check(a), self.check(b));
        self.zip_with(a, b, |p, q| p * q, op)
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, op, ng)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        assert_eq!(t.len(), c.len(), "mul_const length");
        let y = t.data().iter().zip(&c).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(t.shape().to_vec(), y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::MulConst { x: xi, c }, ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let op = Op::Scale(self.check(x), s);
        self.map(x, |v| v * s, op)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let op = Op::AddScalar(self.check(x));
        self.map(x, |v| v + s, op)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let op = Op::Log(self.check(x));
        self.map(x, |v| v.ln(), op)
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let op = Op::ClampMin(self.check(x), floor);
        self.map(x, |v| v.max(floor), op)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let op = Op::Abs(self.check(x));
        self.map(x, |v| v.abs(), op)
    }

    pub fn powf(&mut self, x: Var, q: T) -> Var {
        let op = Op::Powf(self.check(x), q);
        self.map(x, |v| v.powf(q), op)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let s = self.nodes[xi].value.data().iter().copied().sum();
        let ng = self.ng(&[xi]);
        self.push(Tensor::scalar(s), Op::Sum(xi), ng)
    }

    /// `[B, N]` → `[B]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let n = t.shape()[1];
        let y = t.data().chunks(n).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::new(vec![t.rows()], y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::SumRows(xi), ng)
    }

    /// `y[b] = x[b, idx[b]]` for `x: [B, N]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Var {
        let xi = self.check(x);
        let t = &self.nodes[xi].value;
        let n = t.shape()[1];
        assert_eq!(t.rows(), idx.len(), "pick index count");
        let y = idx
            .iter()
            .enumerate()
            .map(|(b, &k)| {
                assert!(k < n, "pick index {k} out of range {n}");
                t.data()[b * n + k]
            })
            .collect();
        let out = Tensor::new(vec![idx.len()], y).unwrap();
        let ng = self.ng(&[xi]);
        self.push(out, Op::Pick { x: xi, idx: idx.to_vec() }, ng)
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every parameter of `store`.
    /// Parameters not on the loss path get exact zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Grads<T>> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::Graph("loss was not recorded on this tape".into()));
        }
        if let Some(op) = &self.fault {
            return Err(Error::NonFinite(format!("forward op `{op}`")));
        }
        if self.nodes[loss.idx].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.idx].value.shape()
            )));
        }
        let mut out = Grads::zeros_like(store);
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, &mut out)?;
        }
        for (t, p) in out.tensors.iter().zip(store.iter()) {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter `{}`", p.name)));
            }
        }
        Ok(out)
    }

    fn propagate(
        &self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        out: &mut Grads<T>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Accumulator for input `j`, allocated lazily; `None` when `j` needs no gradient.
        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                if nodes[j].needs_grad {
                    Some(grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let dst = out.tensors[*id].data_mut();
                if dst.len() != g.len() {
                    return Err(Error::Shape(format!("parameter {id} gradient size mismatch")));
                }
                dst.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            Op::Conv2d { x, w, b } => {
                let (xs, ws) = (nodes[*x].value.shape(), nodes[*w].value.shape());
                let (bsz, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (h - kh + 1, wd - kw + 1);
                let xd = nodes[*x].value.data();
                let wdat = nodes[*w].value.data();
                if let Some(db) = acc!(*b) {
                    for n in 0..bsz {
                        for fi in 0..f {
                            let base = (n * f + fi) * oh * ow;
                            db[fi] += g[base..base + oh * ow].iter().copied().sum::<T>();
                        }
                    }
                }
                if let Some(dw) = acc!(*w) {
                    for n in 0..bsz {
                        for fi in 0..f {
                            let ybase = (n * f + fi) * oh * ow;
                            for ci in 0..c {
                                for a in 0..kh {
                                    for e in 0..kw {
                                        let mut s = T::zero();
                                        for r in 0..oh {
                                            let xo = ((n * c + ci) * h + r + a) * wd + e;
                                            let yo = ybase + r * ow;
                                            s += dot(&g[yo..yo + ow], &xd[xo..xo + ow]);
                                        }
                                        dw[((fi * c + ci) * kh + a) * kw + e] += s;
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for n in 0..bsz {
                        for fi in 0..f {
                            let ybase = (n * f + fi) * oh * ow;
                            for ci in 0..c {
                                for a in 0..kh {
                                    for e in 0..kw {
                                        let wv = wdat[((fi * c + ci) * kh + a) * kw + e];
                                        for r in 0..oh {
                                            let xo = ((n * c + ci) * h + r + a) * wd + e;
                                            let yo = ybase + r * ow;
                                            axpy(wv, &g[yo..yo + ow], &mut dx[xo..xo + ow]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (bsz, d) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let o = nodes[*w].value.shape()[0];
                let xd = nodes[*x].value.data();
                let wdat = nodes[*w].value.data();
                if let Some(db) = acc!(*b) {
                    for n in 0..bsz {
                        for k in 0..o {
                            db[k] += g[n * o + k];
                        }
                    }
                }
                if let Some(dw) = acc!(*w) {
                    for n in 0..bsz {
                        let xr = &xd[n * d..(n + 1) * d];
                        for k in 0..o {
                            axpy(g[n * o + k], xr, &mut dw[k * d..(k + 1) * d]);
                        }
                    }
                }
                if let Some(dx) = acc!(*x) {
                    for n in 0..bsz {
                        for k in 0..o {
                            axpy(g[n * o + k], &wdat[k * d..(k + 1) * d], &mut dx[n * d..(n + 1) * d]);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xd = nodes[*x].value.data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Reshape(x) | Op::AddScalar(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::SliceRows { x, start } => {
                let t = &nodes[*x].value;
                let cols = t.len() / t.rows().max(1);
                if let Some(dx) = acc!(*x) {
                    let off = start * cols;
                    dx[off..off + g.len()].iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = acc!(*x) {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gs: T = gr.iter().copied().sum();
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gv - yv.exp() * gs;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                if let Some(dx) = acc!(*x) {
                    for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let gs = dot(gr, yr);
                        for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += yv * (gv - gs);
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = acc!(*a) {
                    for i in 0..m {
                        for kk in 0..k {
                            da[i * k + kk] += dot(&g[i * n..(i + 1) * n], &bd[kk * n..(kk + 1) * n]);
                        }
                    }
                }
                if let Some(db) = acc!(*b) {
                    for i in 0..m {
                        for kk in 0..k {
                            axpy(ad[i * k + kk], &g[i * n..(i + 1) * n], &mut db[kk * n..(kk + 1) * n]);
                        }
                    }
                }
            }
            Op::MatMulBt { a, b } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[0];
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = acc!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &bd[j * k..(j + 1) * k], &mut da[i * k..(i + 1) * k]);
                        }
                    }
                }
                if let Some(db) = acc!(*b) {
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &ad[i * k..(i + 1) * k], &mut db[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.data();
                let f = node.value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    for (r, &nrm) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * f..(r + 1) * f], &g[r * f..(r + 1) * f]);
                        let yg = dot(yr, gr);
                        for ((d, &gv), &yv) in dx[r * f..(r + 1) * f].iter_mut().zip(gr).zip(yr) {
                            *d += (gv - yv * yg) / nrm;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
                if let Some(da) = acc!(*a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::MulConst { x, c } => {
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &cv) in dx.iter_mut().zip(g).zip(c) {
                        *d += gv * cv;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *s);
                }
            }
            Op::Log(x) => {
                let xd = nodes[*x].value.data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv / xv;
                    }
                }
            }
            Op::ClampMin(x, floor) => {
                let xd = nodes[*x].value.data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > *floor {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let xd = nodes[*x].value.data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        if xv > T::zero() {
                            *d += gv;
                        } else if xv < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Powf(x, q) => {
                let xd = nodes[*x].value.data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xd) {
                        *d += gv * *q * xv.powf(*q - T::one());
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SumRows(x) => {
                let n = nodes[*x].value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    for (dr, &gv) in dx.chunks_mut(n).zip(g) {
                        dr.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let n = nodes[*x].value.shape()[1];
                if let Some(dx) = acc!(*x) {
                    for (b, (&k, &gv)) in idx.iter().zip(g).enumerate() {
                        dx[b * n + k] += gv;
                    }
                }
            }
        }
        Ok(())
    }
}
