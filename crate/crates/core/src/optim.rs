//! Adam with L2 weight decay, global-norm clipping, and warmup + cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::autograd::Grads;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Self { cfg, m: vec![None; n_params], v: vec![None; n_params], t: 0 }
    }

    /// One update. Frozen parameters are skipped entirely, so they stay bitwise unchanged.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let step = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let wd = T::from_f64_lossy(c.weight_decay);
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let p = store.get_mut(id);
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gd = gv + wd * *pv;
                *mv = b1 * *mv + (T::one() - b1) * gd;
                *vv = b2 * *vv + (T::one() - b2) * gd * gd;
                *pv -= step * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// Rescale gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64_lossy();
    if norm > max_norm && norm.is_finite() {
        grads.scale_all(T::from_f64_lossy(max_norm / norm));
    }
    norm
}

/// Linear warmup to `base` over `warmup` steps, then cosine annealing to zero at `total`.
///
/// `lr(0) = base / warmup`, `lr(warmup) = base`, non-increasing afterwards.
pub fn lr_at(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn lr_schedule_shape() {
        let (base, w, total) = (1e-3, 10, 100);
        assert!((lr_at(0, base, w, total) - base / w as f64).abs() < 1e-15);
        assert!((lr_at(w, base, w, total) - base).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in w..=total {
            let lr = lr_at(s, base, w, total);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(lr_at(total, base, w, total).abs() < 1e-18);
    }

    #[test]
    fn adam_minimises_quadratic_and_skips_frozen() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::full(&[3], 2.0));
        let b = store.add("b", Tensor::full(&[1], 5.0));
        store.set_frozen("b", true);
        let mut opt = Adam::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, store.len());
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let pa = g.param(a);
                let pb = g.param(b);
                let sq = g.square(pa);
                let s = g.sum(sq);
                let l = g.mul(s, pb);
                g.backward(l)
            };
            opt.step(&mut store, &grads, 1e-2);
        }
        assert!(store.get(a).max_abs() < 1e-3);
        assert_eq!(store.get(b).data(), &[5.0]);
    }
}
