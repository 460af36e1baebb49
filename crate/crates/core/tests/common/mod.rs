//! Reference implementations written independently of the library, plus
//! finite-difference gradient checking. Shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use hivae_core::autograd::{Graph, Var};
use hivae_core::decoder::TemporalAlignBlock;
use hivae_core::nn::{Linear, MultiHeadAttention};
use hivae_core::params::{ParamId, ParamStore};
use hivae_core::tensor::Tensor;
use rand::Rng;

/// KL(N(mu, exp(logvar)) || N(0, 1)) by composite Simpson quadrature of `q log(q / p)`.
pub fn kl_quadrature(mu: f64, logvar: f64) -> f64 {
    let s = (0.5 * logvar).exp();
    let (lo, hi) = (mu - 14.0 * s, mu + 14.0 * s);
    let n = 40_000;
    let h = (hi - lo) / n as f64;
    let ln2pi = (2.0 * PI).ln();
    let f = |x: f64| {
        let lq = -0.5 * ((x - mu) / s).powi(2) - s.ln() - 0.5 * ln2pi;
        let lp = -0.5 * x * x - 0.5 * ln2pi;
        lq.exp() * (lq - lp)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

pub type Mat = Vec<Vec<f64>>;

pub fn mat_of(t: &Tensor<f64>) -> Mat {
    let [r, c] = [t.shape()[0], t.shape()[1]];
    (0..r).map(|i| (0..c).map(|j| t.get(&[i, j])).collect()).collect()
}

/// `x W + b` with `W: [in, out]`.
pub fn affine(x: &Mat, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), din);
            (0..dout)
                .map(|o| (0..din).map(|i| row[i] * w.get(&[i, o])).sum::<f64>() + b.map_or(0.0, |b| b.get(&[o])))
                .collect()
        })
        .collect()
}

pub fn linear_ref(store: &ParamStore<f64>, lin: &Linear, x: &Mat) -> Mat {
    affine(x, store.get(lin.weight), lin.bias.map(|b| store.get(b)))
}

/// Single-head `softmax(q k^T / sqrt(d)) v`, one row at a time.
pub fn dense_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vj)| w / z * vj[c]).sum()).collect()
        })
        .collect()
}

/// Multi-head attention by explicit per-head slicing.
pub fn mha_ref(store: &ParamStore<f64>, attn: &MultiHeadAttention, x: &Mat, ctx: &Mat) -> Mat {
    let q = linear_ref(store, &attn.q, x);
    let k = linear_ref(store, &attn.k, ctx);
    let v = linear_ref(store, &attn.v, ctx);
    let d = q[0].len();
    let dh = d / attn.heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..attn.heads {
        let cut = |m: &Mat| -> Mat { m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect() };
        let o = dense_attention(&cut(&q), &cut(&k), &cut(&v));
        for (dst, src) in out.iter_mut().zip(o) {
            dst[h * dh..(h + 1) * dh].copy_from_slice(&src);
        }
    }
    linear_ref(store, &attn.o, &out)
}

fn layer_norm_row(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mu) / (var + eps).sqrt()).collect()
}

/// Temporal alignment block on `x: [B, F, L, d]`, `cond: [B, d]`, written as loops.
pub fn tab_ref(store: &ParamStore<f64>, tab: &TemporalAlignBlock, x: &Tensor<f64>, cond: &Tensor<f64>, ln_eps: f64) -> Tensor<f64> {
    let s = x.shape();
    let (b, f, l, d) = (s[0], s[1], s[2], s[3]);
    let m = linear_ref(store, &tab.ada, &mat_of(cond));
    let mut out = x.clone();
    for bi in 0..b {
        let (shift, scale, gate) = (&m[bi][..d], &m[bi][d..2 * d], &m[bi][2 * d..]);
        for li in 0..l {
            let seq: Mat = (0..f)
                .map(|fi| {
                    let row: Vec<f64> = (0..d).map(|c| x.get(&[bi, fi, li, c])).collect();
                    layer_norm_row(&row, ln_eps).iter().enumerate().map(|(c, v)| v * (1.0 + scale[c]) + shift[c]).collect()
                })
                .collect();
            let a = mha_ref(store, &tab.attn, &seq, &seq);
            for fi in 0..f {
                for c in 0..d {
                    out.set(&[bi, fi, li, c], x.get(&[bi, fi, li, c]) + gate[c] * a[fi][c]);
                }
            }
        }
    }
    out
}

/// Overwrite every parameter with `N(0, std^2)` draws (zero-initialized heads
/// would otherwise hide most of the network from a gradient check).
pub fn randomize(store: &mut ParamStore<f64>, std: f64, rng: &mut impl Rng) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::randn(&shape, rng).scale(std);
    }
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub within: usize,
    pub worst: f64,
    pub worst_name: String,
}

impl GradReport {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.checked.max(1) as f64
    }

    /// At least 95% of elements within `tol`, none beyond `cap`.
    pub fn passes(&self) -> bool {
        self.checked > 0 && self.fraction() >= 0.95 && self.worst <= 1e-3
    }
}

/// Relative error with a floor that keeps round-off on near-zero gradients from dominating.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare analytic gradients of the scalar `loss` with central differences
/// for every element of every parameter whose name starts with `prefix`.
pub fn grad_check(
    store: &mut ParamStore<f64>,
    prefix: &str,
    tol: f64,
    h: f64,
    loss: &dyn Fn(&mut Graph<f64>) -> Var,
) -> GradReport {
    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g);
        g.backward(l)
    };
    let value = |store: &ParamStore<f64>| {
        let mut g = Graph::inference(store);
        let l = loss(&mut g);
        g.value(l).data()[0]
    };
    let ids: Vec<ParamId> = store.ids().filter(|id| store.entry(*id).name.starts_with(prefix)).collect();
    let mut rep = GradReport { checked: 0, within: 0, worst: 0.0, worst_name: String::new() };
    for id in ids {
        let grad = analytic.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let lp = value(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let lm = value(store);
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let e = rel_err(grad.data()[i], fd);
            rep.checked += 1;
            if e <= tol {
                rep.within += 1;
            }
            if e > rep.worst {
                rep.worst = e;
                rep.worst_name = format!("{}[{i}]", store.entry(id).name);
            }
        }
    }
    rep
}

/// `sum(w * y)` with a fixed, non-uniform weight so every output element matters.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
    let w = Tensor::from_fn(g.shape(y), |i| {
        let k = i.iter().enumerate().map(|(a, v)| (a + 1) * v).sum::<usize>();
        ((k as f64) * 0.37).sin() + 0.2
    });
    let n = w.len() as f64;
    // Averaging keeps |loss| near one, so rounding in the loss value stays
    // well under the error floor for gradients that are zero by symmetry.
    let w = g.input(w.map(|v| v / n));
    let p = g.mul(y, w);
    g.sum(p)
}
