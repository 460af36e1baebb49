//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! through [`Graph::param`] and are the only leaves that collect gradients.
//! Shape errors inside the graph are programming errors and panic; model code
//! validates user-facing shapes before building the graph.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides_of, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Clamp { x: Var, lo: T, hi: T },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    BroadcastTo(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by parameter.
pub struct Grads<T> {
    per_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.per_param.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.per_param
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> T {
        self.iter().map(|(_, g)| g.sum_sq()).sum::<T>().sqrt()
    }

    pub fn scale_all(&mut self, s: T) {
        for g in self.per_param.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    node_param: Vec<Option<ParamId>>,
    track: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            node_param: Vec::new(),
            track: true,
        }
    }

    /// A graph that never requires gradients; used for inference.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new(params);
        g.track = false;
        g
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.track });
        self.node_param.push(None);
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn take(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[]))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        let trainable = !self.params.is_frozen(id);
        let v = self.push(self.params.get(id).clone(), Op::Param, trainable);
        self.param_nodes[id.index()] = Some(v);
        self.node_param[v.0] = Some(id);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `a[..., m, k] @ b`, where `b` is `[k, n]` (shared) or `[..., k, n]`
    /// with the same batch dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] @ b^T`, with `b` stored as `[n, k]` or `[..., n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let out = matmul_forward(self.value(a), self.value(b), trans_b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, trans_b }, ng)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let d = *x.shape().last().expect("softmax of scalar");
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let d = *x.shape().last().expect("layer_norm of scalar");
        let dn = T::from_usize_lossy(d);
        let mut out = x.clone();
        let mut rstds = Vec::with_capacity(x.len() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNorm { x: a, rstd: rstds }, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_fwd);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(out, Op::Clamp { x: a, lo, hi }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).reshape(shape).unwrap_or_else(|e| panic!("{e}"));
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let out = self.value(a).permute(axes);
        let ng = self.ng(a);
        self.push(out, Op::Permute(a, axes.to_vec()), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis).unwrap_or_else(|e| panic!("{e}"));
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat(parts.to_vec(), axis), ng)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = self.value(a).narrow(axis, start, len);
        let ng = self.ng(a);
        self.push(out, Op::Narrow { x: a, axis, start }, ng)
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let zeros = Tensor::zeros(shape);
        let out = broadcast_binary(&zeros, self.value(a), |_, y| y);
        assert_eq!(out.shape(), shape, "cannot broadcast {:?} to {shape:?}", self.shape(a));
        let ng = self.ng(a);
        self.push(out, Op::BroadcastTo(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Reverse pass from a scalar `loss`; returns gradients for trainable parameters.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param => grads[i] = Some(gout),
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, || reduce_to(&gout, self.shape(*a)));
                    self.accum(&mut grads, *b, || reduce_to(&gout, self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, || reduce_to(&gout, self.shape(*a)));
                    self.accum(&mut grads, *b, || reduce_to(&gout, self.shape(*b)).scale(-T::one()));
                }
                Op::Mul(a, b) => {
                    self.accum(&mut grads, *a, || {
                        let full = broadcast_binary(&gout, self.value(*b), |g, y| g * y);
                        reduce_to(&full, self.shape(*a))
                    });
                    self.accum(&mut grads, *b, || {
                        let full = broadcast_binary(&gout, self.value(*a), |g, x| g * x);
                        reduce_to(&full, self.shape(*b))
                    });
                }
                Op::Scale(a, s) => self.accum(&mut grads, *a, || gout.scale(*s)),
                Op::AddScalar(a) => self.accum(&mut grads, *a, || gout.clone()),
                Op::MatMul { a, b, trans_b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    self.accum(&mut grads, *a, || matmul_grad_lhs(&gout, vb, *trans_b));
                    self.accum(&mut grads, *b, || matmul_grad_rhs(va, &gout, vb.shape(), *trans_b));
                }
                Op::Softmax(a) => self.accum(&mut grads, *a, || {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let mut dx = gout.clone();
                    for (row, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                        let dot: T = row.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                        for (g, &p) in row.iter_mut().zip(yr) {
                            *g = p * (*g - dot);
                        }
                    }
                    dx
                }),
                Op::LayerNorm { x, rstd } => self.accum(&mut grads, *x, || {
                    let y = &node.value;
                    let d = *y.shape().last().unwrap();
                    let dn = T::from_usize_lossy(d);
                    let mut dx = gout.clone();
                    for ((row, yr), &r) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(rstd) {
                        let mg = row.iter().copied().sum::<T>() / dn;
                        let mgy = row.iter().zip(yr).map(|(&g, &yy)| g * yy).sum::<T>() / dn;
                        for (g, &yy) in row.iter_mut().zip(yr) {
                            *g = r * (*g - mg - yy * mgy);
                        }
                    }
                    dx
                }),
                Op::Gelu(a) => self.accum(&mut grads, *a, || {
                    gout.zip_map(self.value(*a), |g, x| g * gelu_grad(x)).unwrap()
                }),
                Op::Silu(a) => self.accum(&mut grads, *a, || {
                    gout.zip_map(self.value(*a), |g, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .unwrap()
                }),
                Op::Exp(a) => self.accum(&mut grads, *a, || gout.zip_map(&node.value, |g, y| g * y).unwrap()),
                Op::Clamp { x, lo, hi } => self.accum(&mut grads, *x, || {
                    gout.zip_map(self.value(*x), |g, v| if v > *lo && v < *hi { g } else { T::zero() })
                        .unwrap()
                }),
                Op::Reshape(a) => self.accum(&mut grads, *a, || gout.clone().into_reshaped(self.shape(*a))),
                Op::Permute(a, axes) => self.accum(&mut grads, *a, || {
                    let mut inv = vec![0; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    gout.permute(&inv)
                }),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.shape(p)[*axis];
                        self.accum(&mut grads, p, || gout.narrow(*axis, start, len));
                        start += len;
                    }
                }
                Op::Narrow { x, axis, start } => self.accum(&mut grads, *x, || {
                    let full = self.shape(*x);
                    let len = gout.shape()[*axis];
                    let mut parts = Vec::new();
                    let mut before_shape = full.to_vec();
                    before_shape[*axis] = *start;
                    let mut after_shape = full.to_vec();
                    after_shape[*axis] = full[*axis] - start - len;
                    let before = Tensor::zeros(&before_shape);
                    let after = Tensor::zeros(&after_shape);
                    parts.push(&before);
                    parts.push(&gout);
                    parts.push(&after);
                    Tensor::concat(&parts, *axis).unwrap()
                }),
                Op::BroadcastTo(a) => self.accum(&mut grads, *a, || reduce_to(&gout, self.shape(*a))),
                Op::Sum(a) => {
                    let g = gout.data()[0];
                    self.accum(&mut grads, *a, || Tensor::full(self.shape(*a), g));
                }
                Op::Mean(a) => {
                    let n = T::from_usize_lossy(self.value(*a).len().max(1));
                    let g = gout.data()[0] / n;
                    self.accum(&mut grads, *a, || Tensor::full(self.shape(*a), g));
                }
            }
        }

        let mut per_param: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(pid), Some(g)) = (self.node_param[i], g) {
                per_param[pid.index()] = Some(g);
            }
        }
        Grads { per_param }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], target: Var, f: impl FnOnce() -> Tensor<T>) {
        if !self.ng(target) {
            return;
        }
        let g = f();
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()), T::from_f64_lossy(0.044715))
}

/// `tanh` through a single `exp`; libm's `tanh` dominates GELU cost otherwise.
fn tanh_exp<T: Scalar>(u: T) -> T {
    let two = T::from_f64_lossy(2.0);
    T::one() - two / (T::one() + (two * u).exp())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + tanh_exp(c * (x + k * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + k * x * x * x);
    let th = tanh_exp(u);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

/// Numpy-style broadcast shape of `a` and `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when indexed by an `out`-shaped multi-index; broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

fn for_each_offset(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    for _ in 0..n / inner {
        for j in 0..inner {
            f(oa + j * ia, ob + j * ib);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f).unwrap();
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()));
    // Fast path: b repeats over a's leading axes.
    if out == a.shape() && !b.is_empty() && a.shape().ends_with(b.shape()) {
        let nb = b.len();
        let data = a.data().iter().enumerate().map(|(i, &x)| f(x, b.data()[i % nb])).collect();
        return Tensor::from_vec(&out, data);
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let mut data = Vec::with_capacity(numel(&out));
    let (da, db) = (a.data(), b.data());
    for_each_offset(&out, &sa, &sb, |i, j| data.push(f(da[i], db[j])));
    Tensor::from_vec(&out, data)
}

/// Sum `g` down to `shape` over broadcast axes.
pub(crate) fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    if !out.is_empty() && g.shape().ends_with(shape) {
        let n = out.len();
        let od = out.data_mut();
        for (i, &v) in g.data().iter().enumerate() {
            od[i % n] += v;
        }
        return out;
    }
    let so = broadcast_strides(shape, g.shape());
    let sg = strides_of(g.shape());
    let gd = g.data();
    let od = out.data_mut();
    for_each_offset(g.shape(), &sg, &so, |i, j| od[j] += gd[i]);
    out
}

fn split_batch(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    assert!(r >= 2, "matmul needs rank >= 2, got {shape:?}");
    (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1])
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Tensor<T> {
    let (batch, m, k) = split_batch(a.shape());
    let (bb, br, bc) = split_batch(b.shape());
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "matmul inner dims: {:?} x {:?} (trans_b={trans_b})", a.shape(), b.shape());
    let b_strides = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
    let mut out_shape = a.shape()[..a.rank() - 2].to_vec();
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    if b.rank() == 2 {
        T::gemm(batch * m, k, n, T::one(), a.data(), (k as isize, 1), b.data(), b_strides, T::zero(), &mut out, (n as isize, 1));
    } else {
        assert_eq!(a.shape()[..a.rank() - 2], b.shape()[..b.rank() - 2], "matmul batch dims");
        debug_assert_eq!(batch, bb);
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
    }
    Tensor::from_vec(&out_shape, out)
}

fn matmul_grad_lhs<T: Scalar>(gout: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Tensor<T> {
    // dA = dC @ op(B)^T
    let (batch, m, n) = split_batch(gout.shape());
    let (_, br, bc) = split_batch(b.shape());
    let k = if trans_b { bc } else { br };
    // op(B)^T is n x k; B stored [k,n] -> strides (1, n); stored [n,k] -> (k, 1)
    let bt_strides = if trans_b { (bc as isize, 1) } else { (1, bc as isize) };
    let mut shape = gout.shape()[..gout.rank() - 2].to_vec();
    shape.extend([m, k]);
    let mut out = vec![T::zero(); batch * m * k];
    if b.rank() == 2 {
        T::gemm(batch * m, n, k, T::one(), gout.data(), (n as isize, 1), b.data(), bt_strides, T::zero(), &mut out, (k as isize, 1));
    } else {
        for i in 0..batch {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                &gout.data()[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                bt_strides,
                T::zero(),
                &mut out[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
            );
        }
    }
    Tensor::from_vec(&shape, out)
}

fn matmul_grad_rhs<T: Scalar>(a: &Tensor<T>, gout: &Tensor<T>, b_shape: &[usize], trans_b: bool) -> Tensor<T> {
    // not transposed: dB[k,n] = A^T @ dC ; transposed: dB[n,k] = dC^T @ A
    let (batch, m, k) = split_batch(a.shape());
    let n = gout.shape()[gout.rank() - 1];
    let mut out = vec![T::zero(); numel(b_shape)];
    let shared = b_shape.len() == 2;
    let rows = if shared { batch * m } else { m };
    let nb = if shared { 1 } else { batch };
    for i in 0..nb {
        let a_sl = if shared { a.data() } else { &a.data()[i * m * k..(i + 1) * m * k] };
        let g_sl = if shared { gout.data() } else { &gout.data()[i * m * n..(i + 1) * m * n] };
        let o_sl = if shared { &mut out[..] } else { &mut out[i * k * n..(i + 1) * k * n] };
        if trans_b {
            T::gemm(n, rows, k, T::one(), g_sl, (1, n as isize), a_sl, (k as isize, 1), T::zero(), o_sl, (k as isize, 1));
        } else {
            T::gemm(k, rows, n, T::one(), a_sl, (1, k as isize), g_sl, (n as isize, 1), T::zero(), o_sl, (n as isize, 1));
        }
    }
    Tensor::from_vec(b_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(p) * w))/dp for a single parameter.
    fn check(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let pid = store.add("p", Tensor::randn(shape, &mut rng));
        let loss_of = |store: &ParamStore<f64>| {
            let mut g = Graph::new(store);
            let p = g.param(pid);
            let y = build(&mut g, p);
            let w = Tensor::from_fn(g.shape(y), |i| 0.3 + i.iter().sum::<usize>() as f64 * 0.17);
            let w = g.input(w);
            let prod = g.mul(y, w);
            let l = g.sum(prod);
            (g.value(l).data()[0], g.backward(l).get(pid).cloned().unwrap())
        };
        let (_, analytic) = loss_of(&store);
        let h = 1e-6;
        for i in 0..store.get(pid).len() {
            let orig = store.get(pid).data()[i];
            store.get_mut(pid).data_mut()[i] = orig + h;
            let (lp, _) = loss_of(&store);
            store.get_mut(pid).data_mut()[i] = orig - h;
            let (lm, _) = loss_of(&store);
            store.get_mut(pid).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((a - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "elem {i}: analytic {a} vs fd {fd}");
        }
    }

    #[test]
    fn grad_softmax_layernorm_gelu() {
        check(&[3, 5], |g, p| {
            let s = g.softmax(p);
            let l = g.layer_norm(p, 1e-5);
            let a = g.gelu(l);
            let b = g.silu(p);
            let c = g.add(s, a);
            g.add(c, b)
        });
    }

    #[test]
    fn grad_matmul_variants() {
        check(&[2, 3, 4], |g, p| {
            let w = g.input(Tensor::from_fn(&[4, 2], |i| (i[0] as f64 - i[1] as f64) * 0.5));
            let shared = g.matmul(p, w);
            let pt = g.matmul_t(p, p);
            let batched = g.matmul(pt, p);
            let s = g.sum(batched);
            let s = g.broadcast_to(s, &[2, 3, 2]);
            g.add(shared, s)
        });
    }

    #[test]
    fn grad_shape_ops() {
        check(&[2, 3, 4], |g, p| {
            let q = g.permute(p, &[2, 0, 1]);
            let r = g.reshape(q, &[4, 6]);
            let a = g.narrow(r, 1, 1, 3);
            let b = g.narrow(r, 0, 0, 4);
            let b = g.narrow(b, 1, 0, 3);
            let c = g.concat(&[a, b], 0);
            let e = g.exp(c);
            let cl = g.clamp(c, -0.5, 0.5);
            let m = g.mul(e, cl);
            let row = g.narrow(m, 0, 0, 1);
            g.sub(m, row)
        });
    }

    #[test]
    fn broadcast_general_middle_axis() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i[0] + i[1] + i[2]) as f64);
        let b = Tensor::<f64>::from_fn(&[2, 1, 4], |i| (i[0] * 10 + i[2]) as f64);
        let c = broadcast_binary(&a, &b, |x, y| x * y);
        assert_eq!(c.get(&[1, 2, 3]), a.get(&[1, 2, 3]) * b.get(&[1, 0, 3]));
        let r = reduce_to(&c, &[2, 1, 4]);
        let expect: f64 = (0..3).map(|j| c.get(&[1, j, 2])).sum();
        assert_eq!(r.get(&[1, 0, 2]), expect);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[2]));
        let b = store.add("b", Tensor::ones(&[2]));
        store.set_frozen("a", true);
        let mut g = Graph::new(&store);
        let va = g.param(a);
        let vb = g.param(b);
        let m = g.mul(va, vb);
        let l = g.sum(m);
        let grads = g.backward(l);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);
    }
}
