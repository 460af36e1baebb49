//! Transformer building blocks on top of [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{normal, xavier, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Linear layer initialised to zero output (adaLN-style modulation heads).
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Scaled dot-product attention over `[N, L, d]` tensors split into `heads`.
///
/// Each head uses temperature `sqrt(d / heads)`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Var {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let (n, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    assert!(heads >= 1 && d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    if heads == 1 {
        let s = g.matmul_t(q, k);
        let s = g.scale(s, scale);
        let p = g.softmax(s);
        return g.matmul(p, v);
    }
    let split = |g: &mut Graph<T>, x: Var, l: usize| {
        let x = g.reshape(x, &[n, l, heads, dh]);
        g.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(g, q, lq);
    let kh = split(g, k, lk);
    let vh = split(g, v, lk);
    let s = g.matmul_t(qh, kh);
    let s = g.scale(s, scale);
    let p = g.softmax(s);
    let o = g.matmul(p, vh);
    let o = g.permute(o, &[0, 2, 1, 3]);
    g.reshape(o, &[n, lq, d])
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    /// `queries: [N, Lq, d]` attend over `context: [N, Lk, d]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, queries: Var, context: Var) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let a = attention(g, q, k, v, self.heads);
        self.o.forward(g, a)
    }

    /// Overwrite all four projections with identity weights and zero bias.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for lin in [&self.q, &self.k, &self.v, &self.o] {
            let d = lin.in_dim;
            *store.get_mut(lin.weight) = Tensor::from_fn(&[d, d], |i| if i[0] == i[1] { T::one() } else { T::zero() });
            if let Some(b) = lin.bias {
                *store.get_mut(b) = Tensor::zeros(&[d]);
            }
        }
    }
}

/// `x * (1 + scale) + shift`, with `shift`/`scale` shaped `[N, 1, d]`.
pub fn modulate<T: Scalar>(g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Var {
    let s1 = g.add_scalar(scale, T::one());
    let y = g.mul(x, s1);
    g.add(y, shift)
}

/// Standard transformer sinusoidal table: row `i` encodes `positions[i]`.
pub fn sinusoidal<T: Scalar>(positions: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[positions.len(), dim], |ix| {
        let (p, j) = (positions[ix[0]], ix[1]);
        if j >= 2 * half {
            return T::zero();
        }
        let freq = (-(10000f64.ln()) * (j % half) as f64 / half.max(1) as f64).exp();
        let arg = p * freq;
        T::from_f64_lossy(if j < half { arg.sin() } else { arg.cos() })
    })
}

/// 2-D positional table `[h * w, dim]`: first half encodes rows, second half columns.
pub fn sinusoidal_2d<T: Scalar>(h: usize, w: usize, dim: usize) -> Tensor<T> {
    let dh = dim / 2;
    let rows: Vec<f64> = (0..h).map(|i| i as f64).collect();
    let cols: Vec<f64> = (0..w).map(|i| i as f64).collect();
    let er = sinusoidal::<T>(&rows, dh);
    let ec = sinusoidal::<T>(&cols, dim - dh);
    Tensor::from_fn(&[h * w, dim], |ix| {
        let (y, x) = (ix[0] / w, ix[0] % w);
        if ix[1] < dh {
            er.get(&[y, ix[1]])
        } else {
            ec.get(&[x, ix[1] - dh])
        }
    })
}

/// Sinusoidal embedding of a continuous time in `[0, 1]` followed by a 2-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
}

/// Nominal schedule granularity; `t` is scaled by this before the sinusoid.
pub const TIME_SCALE: f64 = 1000.0;

impl TimeEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let freq_dim = dim.max(8);
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), freq_dim, dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, true, rng),
            freq_dim,
        }
    }

    /// `t` holds one time per batch element; output `[N, dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, t: &[f64]) -> Var {
        let pos: Vec<f64> = t.iter().map(|&x| x * TIME_SCALE).collect();
        let e = g.input(sinusoidal(&pos, self.freq_dim));
        let h = self.fc1.forward(g, e);
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Learned tensor of a fixed shape (queries, null tokens, embeddings).
pub fn learned<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    std: f64,
    rng: &mut R,
) -> ParamId {
    store.add(name, normal(shape, std, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn multihead_equals_per_head_dense_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let store = ParamStore::<f64>::new();
        let (n, lq, lk, d, h) = (2, 3, 5, 4, 2);
        let q = Tensor::<f64>::randn(&[n, lq, d], &mut rng);
        let k = Tensor::<f64>::randn(&[n, lk, d], &mut rng);
        let v = Tensor::<f64>::randn(&[n, lk, d], &mut rng);
        let mut g = Graph::new(&store);
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let o = attention(&mut g, qv, kv, vv, h);
        let out = g.value(o);
        let dh = d / h;
        for b in 0..n {
            for head in 0..h {
                for i in 0..lq {
                    let logits: Vec<f64> = (0..lk)
                        .map(|j| (0..dh).map(|c| q.get(&[b, i, head * dh + c]) * k.get(&[b, j, head * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let s: f64 = e.iter().sum();
                    for c in 0..dh {
                        let want: f64 = (0..lk).map(|j| e[j] / s * v.get(&[b, j, head * dh + c])).sum();
                        assert!((out.get(&[b, i, head * dh + c]) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sinusoidal_2d_rows_are_distinct() {
        let pe = sinusoidal_2d::<f64>(4, 4, 8);
        for a in 0..16 {
            for b in a + 1..16 {
                let diff: f64 = (0..8).map(|j| (pe.get(&[a, j]) - pe.get(&[b, j])).abs()).sum();
                assert!(diff > 1e-6, "positions {a} and {b} collide");
            }
        }
    }
}
