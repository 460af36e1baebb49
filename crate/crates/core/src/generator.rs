//! Class-conditional generation of packed motion latents with a rectified-flow
//! transformer.
//!
//! Packing projects each stream to a shared channel width `c_m` with a fixed
//! matrix whose rows are orthonormal, standardizes each stream by scalar
//! statistics, repeats the global stream along time up to the detailed frame
//! count, and concatenates the two along the token axis.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::{cfg_velocity, noise_interp_batch, ode_sample, velocity_target};
use crate::error::{Error, Result};
use crate::motion::MotionLatent;
use crate::nn::{learned, modulate, sinusoidal, Linear, Mlp, MultiHeadAttention, TimeEmbedder, LN_EPS};
use crate::optim::{clip_grad_norm, lr_at, Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::fm_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub class_embed_dim: usize,
    pub num_classes: usize,
    /// Shared channel width of packed tokens; `0` picks `max(c_g, c_d)`.
    pub c_m: usize,
    pub cfg_drop: f64,
    pub cfg_weight: f64,
    pub train_steps_t: usize,
    pub infer_steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            class_embed_dim: 128,
            num_classes: 2,
            c_m: 0,
            cfg_drop: 0.20,
            cfg_weight: 5.0,
            train_steps_t: 1000,
            infer_steps: 20,
            lr: 1e-3,
            warmup_steps: 50,
            steps: 400,
            batch_size: 4,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("gen.width must be a positive multiple of gen.heads, gen.layers >= 1"));
        }
        if self.class_embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::config("gen.class_embed_dim and gen.num_classes must be positive"));
        }
        if !(0.0..1.0).contains(&self.cfg_drop) {
            return Err(Error::config("gen.cfg_drop must lie in [0, 1)"));
        }
        if self.infer_steps == 0 || self.steps == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::config("gen.infer_steps, gen.steps, gen.batch_size and gen.lr must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config("gen.warmup_steps exceeds gen.steps"));
        }
        Ok(())
    }
}

/// Scalar standardization statistics of both streams after projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub g_mean: f64,
    pub g_std: f64,
    pub d_mean: f64,
    pub d_std: f64,
}

/// Packed motion for a batch: `m` is `[B, f_d, n_g + n_d, c_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedMotion<T> {
    pub m: Tensor<T>,
    pub norm_stats: NormStats,
}

/// Fixed projections plus fitted statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionPacker {
    /// `[f_g, n_g, c_g]`.
    pub global: [usize; 3],
    /// `[f_d, n_d, c_d]`.
    pub detail: [usize; 3],
    pub c_m: usize,
    /// Row-major `[c_g, c_m]` with orthonormal rows.
    pub proj_g: Vec<f64>,
    /// Row-major `[c_d, c_m]` with orthonormal rows.
    pub proj_d: Vec<f64>,
    pub stats: NormStats,
}

/// `rows x cols` matrix with orthonormal rows drawn from a seeded Gaussian.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = DMatrix::<f64>::from_fn(cols, cols, |_, _| rng.sample(rand_distr::StandardNormal));
    let q = a.qr().q();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(q[(c, r)]);
        }
    }
    out
}

impl MotionPacker {
    pub fn new(global: [usize; 3], detail: [usize; 3], c_m: usize, seed: u64) -> Result<Self> {
        let c_m = if c_m == 0 { global[2].max(detail[2]) } else { c_m };
        if c_m < global[2] || c_m < detail[2] {
            return Err(Error::config(format!(
                "gen.c_m = {c_m} must be at least the stream channel counts {} and {}",
                global[2], detail[2]
            )));
        }
        if global[0] == 0 || detail[0] % global[0] != 0 {
            return Err(Error::config(format!(
                "detail frames {} must be a multiple of global frames {}",
                detail[0], global[0]
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj_g = orthonormal_rows(global[2], c_m, &mut rng);
        let proj_d = orthonormal_rows(detail[2], c_m, &mut rng);
        let stats = NormStats { g_mean: 0.0, g_std: 1.0, d_mean: 0.0, d_std: 1.0 };
        Ok(Self { global, detail, c_m, proj_g, proj_d, stats })
    }

    /// Temporal repeat factor of the global stream.
    pub fn repeat(&self) -> usize {
        self.detail[0] / self.global[0]
    }

    /// `[f_d, n_g + n_d, c_m]`.
    pub fn packed_shape(&self) -> [usize; 3] {
        [self.detail[0], self.global[1] + self.detail[1], self.c_m]
    }

    fn check(&self, motion: &MotionLatent<impl Scalar>) -> Result<usize> {
        let (g, d) = (motion.u_g().shape(), motion.u_d().shape());
        let b = g.first().copied().unwrap_or(0);
        let want_g = [b, self.global[0], self.global[1], self.global[2]];
        let want_d = [b, self.detail[0], self.detail[1], self.detail[2]];
        if g != want_g {
            return Err(Error::shape("pack_motion(u_g)", &want_g, g));
        }
        if d != want_d {
            return Err(Error::shape("pack_motion(u_d)", &want_d, d));
        }
        Ok(b)
    }

    fn project<T: Scalar>(u: &Tensor<T>, proj: &[f64], c: usize, c_m: usize) -> Vec<f64> {
        let rows = u.len() / c;
        let mut out = vec![0.0; rows * c_m];
        for (r, chunk) in u.data().chunks(c).enumerate() {
            let dst = &mut out[r * c_m..(r + 1) * c_m];
            for (k, x) in chunk.iter().enumerate() {
                let x = x.to_f64_lossy();
                for (o, p) in dst.iter_mut().zip(&proj[k * c_m..(k + 1) * c_m]) {
                    *o += x * p;
                }
            }
        }
        out
    }

    fn unproject(m: &[f64], proj: &[f64], c: usize, c_m: usize) -> Vec<f64> {
        let rows = m.len() / c_m;
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let src = &m[r * c_m..(r + 1) * c_m];
            for k in 0..c {
                out[r * c + k] = src.iter().zip(&proj[k * c_m..(k + 1) * c_m]).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    fn moments(v: &[f64]) -> (f64, f64) {
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt().max(1e-8))
    }

    /// Fit the per-stream scalar statistics on a motion dataset.
    pub fn fit<T: Scalar>(&mut self, motion: &MotionLatent<T>) -> Result<NormStats> {
        self.check(motion)?;
        let pg = Self::project(motion.u_g(), &self.proj_g, self.global[2], self.c_m);
        let pd = Self::project(motion.u_d(), &self.proj_d, self.detail[2], self.c_m);
        let (g_mean, g_std) = Self::moments(&pg);
        let (d_mean, d_std) = Self::moments(&pd);
        self.stats = NormStats { g_mean, g_std, d_mean, d_std };
        Ok(self.stats)
    }

    pub fn pack<T: Scalar>(&self, motion: &MotionLatent<T>) -> Result<PackedMotion<T>> {
        let b = self.check(motion)?;
        let s = self.stats;
        let pg = Self::project(motion.u_g(), &self.proj_g, self.global[2], self.c_m);
        let pd = Self::project(motion.u_d(), &self.proj_d, self.detail[2], self.c_m);
        let [fg, ng, _] = self.global;
        let [fd, nd, _] = self.detail;
        let (cm, r) = (self.c_m, self.repeat());
        let n = ng + nd;
        let m = Tensor::from_fn(&[b, fd, n, cm], |i| {
            let (bi, f, tok, ch) = (i[0], i[1], i[2], i[3]);
            let v = if tok < ng {
                (pg[((bi * fg + f / r) * ng + tok) * cm + ch] - s.g_mean) / s.g_std
            } else {
                (pd[((bi * fd + f) * nd + tok - ng) * cm + ch] - s.d_mean) / s.d_std
            };
            T::from_f64_lossy(v)
        });
        Ok(PackedMotion { m, norm_stats: s })
    }

    /// Invert [`MotionPacker::pack`]; repeated global frames are averaged.
    pub fn unpack<T: Scalar>(&self, packed: &PackedMotion<T>) -> Result<MotionLatent<T>> {
        let [fd, n, cm] = self.packed_shape();
        let shape = packed.m.shape();
        let b = shape.first().copied().unwrap_or(0);
        if shape != [b, fd, n, cm] {
            return Err(Error::shape("unpack_motion", &[b, fd, n, cm], shape));
        }
        let s = packed.norm_stats;
        let [fg, ng, cg] = self.global;
        let nd = self.detail[1];
        let r = self.repeat();
        let mut g = vec![0.0; b * fg * ng * cm];
        let mut d = vec![0.0; b * fd * nd * cm];
        for (i, x) in packed.m.data().iter().enumerate() {
            let ch = i % cm;
            let tok = (i / cm) % n;
            let f = (i / (cm * n)) % fd;
            let bi = i / (cm * n * fd);
            let x = x.to_f64_lossy();
            if tok < ng {
                g[((bi * fg + f / r) * ng + tok) * cm + ch] += (x * s.g_std + s.g_mean) / r as f64;
            } else {
                d[((bi * fd + f) * nd + tok - ng) * cm + ch] = x * s.d_std + s.d_mean;
            }
        }
        let ug = Self::unproject(&g, &self.proj_g, cg, cm);
        let ud = Self::unproject(&d, &self.proj_d, self.detail[2], cm);
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<_>>();
        Ok(MotionLatent::from_values(
            Tensor::new(&[b, fg, ng, cg], cast(ug))?,
            Tensor::new(&[b, fd, nd, self.detail[2]], cast(ud))?,
        ))
    }
}

#[derive(Clone, Debug)]
struct GenBlock {
    ada: Linear,
    attn: MultiHeadAttention,
    cross: MultiHeadAttention,
    mlp: Mlp,
}

/// Transformer over packed motion tokens with adaptive time modulation and
/// class conditioning through cross-attention to a class token.
#[derive(Clone, Debug)]
pub struct MotionGenerator {
    pub cfg: GenConfig,
    /// `[f, n, c_m]` of one packed sample.
    pub shape: [usize; 3],
    in_proj: Linear,
    time: TimeEmbedder,
    /// `[num_classes + 1, class_embed_dim]`; the last row is the null class.
    classes: ParamId,
    class_proj: Linear,
    blocks: Vec<GenBlock>,
    final_ada: Linear,
    out: Linear,
}

pub const NAMESPACE: &str = "gen.";

impl MotionGenerator {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: GenConfig, shape: [usize; 3], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let cm = shape[2];
        let blocks = (0..cfg.layers)
            .map(|i| {
                let name = format!("gen.block{i}");
                GenBlock {
                    ada: Linear::zeros(store, &format!("{name}.ada"), w, 6 * w),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), w, cfg.heads, rng),
                    cross: MultiHeadAttention::new(store, &format!("{name}.cross"), w, cfg.heads, rng),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), w, 4 * w, rng),
                }
            })
            .collect();
        Ok(Self {
            in_proj: Linear::new(store, "gen.in_proj", cm, w, true, rng),
            time: TimeEmbedder::new(store, "gen.time", w, rng),
            classes: learned(store, "gen.classes", &[cfg.num_classes + 1, cfg.class_embed_dim], 1.0, rng),
            class_proj: Linear::new(store, "gen.class_proj", cfg.class_embed_dim, w, true, rng),
            blocks,
            final_ada: Linear::zeros(store, "gen.final_ada", w, 2 * w),
            out: Linear::zeros(store, "gen.out", w, cm),
            cfg,
            shape,
        })
    }

    /// Row index used for "no class".
    pub fn null_class(&self) -> usize {
        self.cfg.num_classes
    }

    /// `m: [B, f, n, c_m]`, one time and one class row (or the null row) per sample.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, m: &Tensor<T>, t: &[f64], classes: &[usize]) -> Result<Var> {
        let [f, n, cm] = self.shape;
        let b = m.shape().first().copied().unwrap_or(0);
        if m.shape() != [b, f, n, cm] {
            return Err(Error::shape("gen_forward", &[b, f, n, cm], m.shape()));
        }
        if t.len() != b || classes.len() != b {
            return Err(Error::config(format!("need {b} times and classes, got {} and {}", t.len(), classes.len())));
        }
        if let Some(c) = classes.iter().find(|c| **c > self.null_class()) {
            return Err(Error::config(format!("class id {c} out of range 0..{}", self.cfg.num_classes)));
        }
        let (w, l) = (self.cfg.width, f * n);
        let eps = T::from_f64_lossy(LN_EPS);

        let x = g.input(m.reshape(&[b, l, cm])?);
        let x = self.in_proj.forward(g, x);
        let ftab = sinusoidal::<T>(&(0..f).map(|i| i as f64).collect::<Vec<_>>(), w);
        let ntab = sinusoidal::<T>(&(0..n).map(|i| (i * 7) as f64).collect::<Vec<_>>(), w);
        let pe = Tensor::from_fn(&[l, w], |i| ftab.get(&[i[0] / n, i[1]]) + ntab.get(&[i[0] % n, i[1]]));
        let pe = g.input(pe);
        let mut x = g.add(x, pe);

        let temb = self.time.forward(g, t);
        let cond = g.silu(temb);
        let onehot = Tensor::from_fn(&[b, self.cfg.num_classes + 1], |i| {
            if classes[i[0]] == i[1] {
                T::one()
            } else {
                T::zero()
            }
        });
        let onehot = g.input(onehot);
        let table = g.param(self.classes);
        let emb = g.matmul(onehot, table);
        let ctx = self.class_proj.forward(g, emb);
        let ctx = g.reshape(ctx, &[b, 1, w]);

        for blk in &self.blocks {
            let mods = blk.ada.forward(g, cond);
            let mods = g.reshape(mods, &[b, 1, 6 * w]);
            let chunk = |g: &mut Graph<T>, k: usize| g.narrow(mods, 2, k * w, w);
            let (sh1, sc1, ga1, sh2, sc2, ga2) =
                (chunk(g, 0), chunk(g, 1), chunk(g, 2), chunk(g, 3), chunk(g, 4), chunk(g, 5));
            let h = g.layer_norm(x, eps);
            let h = modulate(g, h, sh1, sc1);
            let a = blk.attn.forward(g, h, h);
            let a = g.mul(a, ga1);
            x = g.add(x, a);
            let h = g.layer_norm(x, eps);
            let c = blk.cross.forward(g, h, ctx);
            x = g.add(x, c);
            let h = g.layer_norm(x, eps);
            let h = modulate(g, h, sh2, sc2);
            let y = blk.mlp.forward(g, h);
            let y = g.mul(y, ga2);
            x = g.add(x, y);
        }
        let mods = self.final_ada.forward(g, cond);
        let mods = g.reshape(mods, &[b, 1, 2 * w]);
        let shift = g.narrow(mods, 2, 0, w);
        let scale = g.narrow(mods, 2, w, w);
        let h = g.layer_norm(x, eps);
        let h = modulate(g, h, shift, scale);
        let y = self.out.forward(g, h);
        Ok(g.reshape(y, &[b, f, n, cm]))
    }

    fn velocity<T: Scalar>(&self, store: &ParamStore<T>, m: &Tensor<T>, t: f64, class: usize) -> Result<Tensor<T>> {
        let b = m.shape()[0];
        let mut g = Graph::inference(store);
        let v = self.forward(&mut g, m, &vec![t; b], &vec![class; b])?;
        Ok(g.take(v))
    }
}

/// Rectified-flow training on `(m, class)` pairs; returns the per-step loss.
pub fn gen_train<T: Scalar>(
    model: &MotionGenerator,
    store: &mut ParamStore<T>,
    data: &Tensor<T>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let n = data.shape().first().copied().unwrap_or(0);
    if n == 0 || labels.len() != n {
        return Err(Error::Precondition(format!("need a non-empty dataset with one label per sample, got {n} and {}", labels.len())));
    }
    if let Some(c) = labels.iter().find(|c| **c >= cfg.num_classes) {
        return Err(Error::config(format!("label {c} out of range 0..{}", cfg.num_classes)));
    }
    let adam = AdamConfig { weight_decay: 0.0, ..Default::default() };
    let mut opt = Adam::new(adam, store.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let b = cfg.batch_size;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
        let cls: Vec<usize> = idx
            .iter()
            .map(|&i| if rng.random::<f64>() < cfg.cfg_drop { model.null_class() } else { labels[i] })
            .collect();
        let parts: Vec<Tensor<T>> = idx.iter().map(|&i| data.index0(i)).collect();
        let m = Tensor::stack0(&parts)?;
        let eps = Tensor::randn(m.shape(), rng);
        let interp = noise_interp_batch(&m, &eps, &t)?;
        let target = velocity_target(&m, &eps)?;
        let mut grads = {
            let mut g = Graph::new(store);
            let v = model.forward(&mut g, &interp, &t, &cls)?;
            let loss = fm_loss(&mut g, v, &target);
            let lv = g.value(loss).data()[0].to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Divergence { phase: "gen".into(), step });
            }
            losses.push(lv);
            g.backward(loss)
        };
        clip_grad_norm(&mut grads, cfg.clip_norm);
        opt.step(store, &grads, lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps));
    }
    Ok(losses)
}

/// Sample `count` packed motions of `class` with guidance `guidance`.
///
/// `guidance == 0` runs only the unconditional branch and `1` only the
/// conditional one, so both match their unguided samplers bitwise.
pub fn gen_sample<T: Scalar, R: Rng + ?Sized>(
    model: &MotionGenerator,
    store: &ParamStore<T>,
    class: Option<usize>,
    count: usize,
    guidance: f64,
    stats: NormStats,
    rng: &mut R,
) -> Result<PackedMotion<T>> {
    if let Some(c) = class {
        if c >= model.cfg.num_classes {
            return Err(Error::config(format!("class id {c} out of range 0..{}", model.cfg.num_classes)));
        }
    }
    let null = model.null_class();
    let field = |m: &Tensor<T>, t: f64| -> Result<Tensor<T>> {
        match class {
            None => model.velocity(store, m, t, null),
            Some(_) if guidance == 0.0 => model.velocity(store, m, t, null),
            Some(c) if guidance == 1.0 => model.velocity(store, m, t, c),
            Some(c) => cfg_velocity(&model.velocity(store, m, t, c)?, &model.velocity(store, m, t, null)?, guidance),
        }
    };
    let [f, n, cm] = model.shape;
    let m = ode_sample(&field, &[count, f, n, cm], model.cfg.infer_steps, rng)?;
    Ok(PackedMotion { m, norm_stats: stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Posterior;

    fn motion(b: usize, seed: u64) -> MotionLatent<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::randn(&[b, 4, 8, 8], &mut rng).scale(3.0);
        let d = Tensor::randn(&[b, 8, 16, 16], &mut rng).map(|x| 0.5 * x + 2.0);
        MotionLatent::from_values(g, d)
    }

    #[test]
    fn pack_round_trip_and_scale() {
        let mut p = MotionPacker::new([4, 8, 8], [8, 16, 16], 0, 3).unwrap();
        let u = motion(3, 1);
        p.fit(&u).unwrap();
        let m = p.pack(&u).unwrap();
        assert_eq!(m.m.shape(), &[3, 8, 24, 16]);
        let back = p.unpack(&m).unwrap();
        assert!(back.u_g().max_abs_diff(u.u_g()) < 1e-9);
        assert!(back.u_d().max_abs_diff(u.u_d()) < 1e-9);
        let std = |t: Tensor<f64>| (t.sum_sq() / t.len() as f64 - t.mean().powi(2)).sqrt();
        assert!((std(m.m.narrow(2, 0, 8)) - 1.0).abs() < 0.1);
        assert!((std(m.m.narrow(2, 8, 16)) - 1.0).abs() < 0.1);
    }

    #[test]
    fn pack_rejects_mismatched_streams() {
        let p = MotionPacker::new([4, 8, 8], [8, 16, 16], 0, 3).unwrap();
        let mut u = motion(1, 2);
        u.detail = Posterior::point(Tensor::zeros(&[1, 8, 16, 8]));
        assert!(p.pack(&u).is_err());
        assert!(MotionPacker::new([3, 8, 8], [8, 16, 16], 0, 0).is_err());
        assert!(MotionPacker::new([4, 8, 8], [8, 16, 16], 4, 0).is_err());
    }
}
