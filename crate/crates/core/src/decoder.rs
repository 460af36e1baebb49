//! Flow-matching conditional decoder.
//!
//! Sign convention: the interpolant is `z_t = (1 - t) z + t eps`, so
//! `d z_t / d t = eps - z = -v` with `v = z - eps` the regression target.
//! Sampling therefore walks from `t = 1` (pure noise) to `t = 0` with
//! `z <- z + dt * v_hat`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{learned, modulate, sinusoidal, sinusoidal_2d, Linear, Mlp, MultiHeadAttention, TimeEmbedder, LN_EPS};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Number of motion-injection blocks (global and detailed alternate; one TAB per pair).
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    /// Spatial patch edge used to tokenize latent frames.
    pub patch: usize,
    pub cfg_drop_prob: f64,
    pub cfg_weight: f64,
    pub train_steps_t: usize,
    pub infer_steps: usize,
    pub output: OutputKind,
    /// Floor on `t` when converting a clean-latent prediction to a velocity.
    pub t_min: f64,
}

/// What the final layer emits before it becomes a velocity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// The velocity itself.
    Velocity,
    /// A clean-latent estimate `d`, returned as `(d - z_t) / max(t, t_min)`.
    #[default]
    Sample,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            width: 64,
            patch: 2,
            cfg_drop_prob: 0.10,
            cfg_weight: 5.0,
            train_steps_t: 1000,
            infer_steps: 20,
            output: OutputKind::Sample,
            t_min: 0.05,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.layers % 2 != 0 {
            return Err(Error::config(format!("decoder.layers must be a positive even number, got {}", self.layers)));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "decoder.width ({}) must be a positive multiple of decoder.heads ({})",
                self.width, self.heads
            )));
        }
        if self.patch == 0 {
            return Err(Error::config("decoder.patch must be positive"));
        }
        if self.infer_steps == 0 {
            return Err(Error::config("decoder.infer_steps must be >= 1"));
        }
        if !(self.cfg_weight >= 0.0) {
            return Err(Error::config("decoder.cfg_weight must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.cfg_drop_prob) {
            return Err(Error::config("decoder.cfg_drop_prob must lie in [0, 1]"));
        }
        if !(self.t_min > 0.0 && self.t_min <= 1.0) {
            return Err(Error::config("decoder.t_min must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Latent and motion geometry the decoder is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderDims {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub global: [usize; 3],
    pub detail: [usize; 3],
}

/// `(1 - t) z + t eps`.
pub fn noise_interp<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Precondition(format!("t must lie in [0, 1], got {t}")));
    }
    if t == 0.0 {
        return if z.shape() == eps.shape() { Ok(z.clone()) } else { Err(Error::shape("noise_interp", z.shape(), eps.shape())) };
    }
    if t == 1.0 {
        return if z.shape() == eps.shape() { Ok(eps.clone()) } else { Err(Error::shape("noise_interp", z.shape(), eps.shape())) };
    }
    let (a, b) = (T::from_f64_lossy(1.0 - t), T::from_f64_lossy(t));
    z.zip_map(eps, |x, e| a * x + b * e)
}

/// Per-sample interpolation with `t[i]` applied to batch element `i`.
pub fn noise_interp_batch<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
    if z.shape() != eps.shape() {
        return Err(Error::shape("noise_interp", z.shape(), eps.shape()));
    }
    if z.shape().first() != Some(&t.len()) {
        return Err(Error::config(format!("need one time per batch element, got {}", t.len())));
    }
    let parts = t
        .iter()
        .enumerate()
        .map(|(i, &ti)| noise_interp(&z.narrow(0, i, 1), &eps.narrow(0, i, 1), ti))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

/// `z - eps`.
pub fn velocity_target<T: Scalar>(z: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
    z.sub(eps)
}

/// `v_uncond + w (v_cond - v_uncond)`, evaluated as `(1 - w) v_uncond + w v_cond`
/// so that `w = 0` and `w = 1` return the respective branch exactly.
pub fn cfg_velocity<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    if w == 1.0 {
        return if v_cond.shape() == v_uncond.shape() { Ok(v_cond.clone()) } else { Err(Error::shape("cfg_velocity", v_uncond.shape(), v_cond.shape())) };
    }
    if w == 0.0 {
        return if v_cond.shape() == v_uncond.shape() { Ok(v_uncond.clone()) } else { Err(Error::shape("cfg_velocity", v_uncond.shape(), v_cond.shape())) };
    }
    let (a, b) = (T::from_f64_lossy(1.0 - w), T::from_f64_lossy(w));
    v_uncond.zip_map(v_cond, |u, c| a * u + b * c)
}

/// Anything that predicts a velocity for a state `z` at time `t`.
pub trait VelocityField<T: Scalar> {
    fn velocity(&self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>>;
}

impl<T: Scalar, F: Fn(&Tensor<T>, f64) -> Result<Tensor<T>>> VelocityField<T> for F {
    fn velocity(&self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self(z, t)
    }
}

/// Forward Euler from `eps` at `t = 1` down to `t = 0` in `steps` uniform steps.
pub fn euler_integrate<T: Scalar, V: VelocityField<T> + ?Sized>(field: &V, eps: Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::config("ode sampling needs steps >= 1"));
    }
    let dt = T::from_f64_lossy(1.0 / steps as f64);
    let mut z = eps;
    for k in 0..steps {
        let t = 1.0 - k as f64 / steps as f64;
        let v = field.velocity(&z, t)?;
        if v.shape() != z.shape() {
            return Err(Error::shape("ode_sample", z.shape(), v.shape()));
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += dt * *vi;
        }
        if !z.all_finite() {
            return Err(Error::Numerical(format!("non-finite state at ode step {k}")));
        }
    }
    Ok(z)
}

/// Draw `eps ~ N(0, I)` of `shape` and integrate.
pub fn ode_sample<T: Scalar, V: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    field: &V,
    shape: &[usize],
    steps: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let eps = Tensor::randn(shape, rng);
    euler_integrate(field, eps, steps)
}

/// One conditioning stream as seen by the decoder.
#[derive(Clone, Debug)]
pub enum Stream<'a, T> {
    /// Learned null tokens for every batch element.
    Null,
    /// Motion latent values `[B, f, n, c]`.
    Value(&'a Tensor<T>),
    /// A graph node `[B, f, n, c]`; `keep[i] == false` swaps element `i` for the null tokens.
    Var(Var, Option<&'a [bool]>),
}

/// Which motion streams reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Full,
    GlobalOnly,
    DetailedOnly,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Full, DecodeMode::GlobalOnly, DecodeMode::DetailedOnly];

    pub fn uses_global(self) -> bool {
        !matches!(self, DecodeMode::DetailedOnly)
    }

    pub fn uses_detail(self) -> bool {
        !matches!(self, DecodeMode::GlobalOnly)
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DecodeMode::Full),
            "global_only" => Ok(DecodeMode::GlobalOnly),
            "detailed_only" => Ok(DecodeMode::DetailedOnly),
            other => Err(Error::config(format!("unknown decode mode {other:?} (full, global_only, detailed_only)"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Full => "full",
            DecodeMode::GlobalOnly => "global_only",
            DecodeMode::DetailedOnly => "detailed_only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Global,
    Detail,
}

#[derive(Clone, Debug)]
struct MotionBlock {
    kind: Kind,
    ada: Linear,
    attn: MultiHeadAttention,
    mlp: Mlp,
}

/// Self-attention along the frame axis, independently for every token index.
#[derive(Clone, Debug)]
pub struct TemporalAlignBlock {
    pub ada: Linear,
    pub attn: MultiHeadAttention,
}

impl TemporalAlignBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ada: Linear::zeros(store, &format!("{name}.ada"), width, 3 * width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
        }
    }

    /// `x: [B, F, L, d]`, `cond: [B, d]` (activated time embedding).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, cond: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, f, l, d) = (s[0], s[1], s[2], s[3]);
        let m = self.ada.forward(g, cond);
        let m = g.reshape(m, &[b, 1, 1, 3 * d]);
        let shift = g.narrow(m, 3, 0, d);
        let scale = g.narrow(m, 3, d, d);
        let gate = g.narrow(m, 3, 2 * d, d);
        let h = g.layer_norm(x, T::from_f64_lossy(LN_EPS));
        let h = modulate(g, h, shift, scale);
        let h = g.permute(h, &[0, 2, 1, 3]);
        let h = g.reshape(h, &[b * l, f, d]);
        let a = self.attn.forward(g, h, h);
        let a = g.reshape(a, &[b, l, f, d]);
        let a = g.permute(a, &[0, 2, 1, 3]);
        let a = g.mul(a, gate);
        g.add(x, a)
    }
}

#[derive(Clone, Debug)]
pub struct FlowDecoder {
    pub cfg: DecoderConfig,
    pub dims: DecoderDims,
    in_proj: Linear,
    time: TimeEmbedder,
    g_embed: Linear,
    d_embed: Linear,
    null_g: ParamId,
    null_d: ParamId,
    blocks: Vec<MotionBlock>,
    tabs: Vec<TemporalAlignBlock>,
    final_ada: Linear,
    out: Linear,
}

pub const NAMESPACE: &str = "decoder.";

impl FlowDecoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: DecoderConfig, dims: DecoderDims, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if dims.height % cfg.patch != 0 || dims.width % cfg.patch != 0 {
            return Err(Error::config(format!(
                "latent grid {}x{} not divisible by decoder.patch {}",
                dims.height, dims.width, cfg.patch
            )));
        }
        let (w, p2) = (cfg.width, cfg.patch * cfg.patch);
        let in_proj = Linear::new(store, "decoder.in_proj", 2 * dims.channels * p2, w, true, rng);
        let time = TimeEmbedder::new(store, "decoder.time", w, rng);
        let g_embed = Linear::new(store, "decoder.g_embed", dims.global[2], w, true, rng);
        let d_embed = Linear::new(store, "decoder.d_embed", dims.detail[2], w, true, rng);
        let null_g = learned(store, "decoder.null_g", &dims.global, 1.0, rng);
        let null_d = learned(store, "decoder.null_d", &dims.detail, 1.0, rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let kind = if i % 2 == 0 { Kind::Global } else { Kind::Detail };
                let name = format!("decoder.block{i}");
                MotionBlock {
                    kind,
                    ada: Linear::zeros(store, &format!("{name}.ada"), w, 6 * w),
                    attn: MultiHeadAttention::new(store, &format!("{name}.attn"), w, cfg.heads, rng),
                    mlp: Mlp::new(store, &format!("{name}.mlp"), w, 4 * w, rng),
                }
            })
            .collect();
        let tabs = (0..cfg.layers / 2)
            .map(|i| TemporalAlignBlock::new(store, &format!("decoder.tab{i}"), w, cfg.heads, rng))
            .collect();
        let final_ada = Linear::zeros(store, "decoder.final_ada", w, 2 * w);
        let out = Linear::zeros(store, "decoder.out", w, dims.channels * p2);
        Ok(Self { cfg, dims, in_proj, time, g_embed, d_embed, null_g, null_d, blocks, tabs, final_ada, out })
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 5] {
        let d = &self.dims;
        [batch, d.channels, d.frames, d.height, d.width]
    }

    pub fn temporal_blocks(&self) -> &[TemporalAlignBlock] {
        &self.tabs
    }

    /// `[B, c, f, h, w]` latent plus `[B, c, h, w]` content -> `[B, f, L, 2c p^2]` tokens.
    fn tokenize<T: Scalar>(&self, interp: &Tensor<T>, content: &Tensor<T>) -> Result<Tensor<T>> {
        let d = &self.dims;
        let b = interp.shape()[0];
        let want = self.latent_shape(b);
        if interp.shape() != want {
            return Err(Error::shape("decoder_forward", &want, interp.shape()));
        }
        let cshape = [b, d.channels, d.height, d.width];
        if content.shape() != cshape {
            return Err(Error::shape("decoder_forward(content)", &cshape, content.shape()));
        }
        let rep = content.reshape(&[b, d.channels, 1, d.height, d.width])?.repeat_interleave(2, d.frames);
        let x = Tensor::concat(&[interp, &rep], 1)?;
        let p = self.cfg.patch;
        let (hp, wp) = (d.height / p, d.width / p);
        Ok(x
            .into_reshaped(&[b, 2 * d.channels, d.frames, hp, p, wp, p])
            .permute(&[0, 2, 3, 5, 1, 4, 6])
            .into_reshaped(&[b, d.frames, hp * wp, 2 * d.channels * p * p]))
    }

    fn stream<T: Scalar>(&self, g: &mut Graph<T>, s: Stream<'_, T>, kind: Kind, b: usize) -> Result<Var> {
        let (null, dims) = match kind {
            Kind::Global => (self.null_g, self.dims.global),
            Kind::Detail => (self.null_d, self.dims.detail),
        };
        let full = [b, dims[0], dims[1], dims[2]];
        let check = |shape: &[usize]| {
            if shape == full {
                Ok(())
            } else {
                Err(Error::shape("decoder_forward(motion)", &full, shape))
            }
        };
        match s {
            Stream::Null => {
                let n = g.param(null);
                Ok(g.broadcast_to(n, &full))
            }
            Stream::Value(t) => {
                check(t.shape())?;
                Ok(g.input(t.clone()))
            }
            Stream::Var(v, keep) => {
                check(g.shape(v))?;
                let Some(keep) = keep else { return Ok(v) };
                if keep.len() != b {
                    return Err(Error::config(format!("keep mask has {} entries for batch {b}", keep.len())));
                }
                if keep.iter().all(|k| *k) {
                    return Ok(v);
                }
                let k = Tensor::from_fn(&[b, 1, 1, 1], |i| if keep[i[0]] { T::one() } else { T::zero() });
                let nk = k.map(|x| T::one() - x);
                let kv = g.input(k);
                let nkv = g.input(nk);
                let n = g.param(null);
                let a = g.mul(v, kv);
                let bn = g.mul(n, nkv);
                Ok(g.add(a, bn))
            }
        }
    }

    /// Predict the velocity for interpolants `interp` at per-sample times `t`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        interp: &Tensor<T>,
        content: Option<&Tensor<T>>,
        u_g: Stream<'_, T>,
        u_d: Stream<'_, T>,
        t: &[f64],
    ) -> Result<Var> {
        let content = content.ok_or_else(|| Error::Precondition("decoder needs the content latent of the first frame".into()))?;
        let tokens = self.tokenize(interp, content)?;
        let b = tokens.shape()[0];
        if t.len() != b {
            return Err(Error::config(format!("need one time per batch element, got {} for {b}", t.len())));
        }
        if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Precondition(format!("t must lie in [0, 1], got {bad}")));
        }
        let d = self.dims;
        let (w, p) = (self.cfg.width, self.cfg.patch);
        let (hp, wp) = (d.height / p, d.width / p);
        let l = hp * wp;
        let f = d.frames;
        let eps = T::from_f64_lossy(LN_EPS);

        let x = g.input(tokens);
        let x = self.in_proj.forward(g, x);
        let sp = sinusoidal_2d::<T>(hp, wp, w);
        let frames: Vec<f64> = (0..f).map(|i| i as f64).collect();
        let tp = sinusoidal::<T>(&frames, w);
        let pe = Tensor::from_fn(&[f, l, w], |i| sp.get(&[i[1], i[2]]) + tp.get(&[i[0], i[2]]));
        let pe = g.input(pe);
        let mut x = g.add(x, pe);

        let temb = self.time.forward(g, t);
        let cond = g.silu(temb);

        let ug = self.stream(g, u_g, Kind::Global, b)?;
        let ud = self.stream(g, u_d, Kind::Detail, b)?;
        let [fg, ng, _] = d.global;
        let [fd, nd, _] = d.detail;
        let ge = self.g_embed.forward(g, ug);
        let gpos: Vec<f64> = (0..fg * ng).map(|i| i as f64).collect();
        let gpe = g.input(sinusoidal::<T>(&gpos, w).into_reshaped(&[fg, ng, w]));
        let ge = g.add(ge, gpe);
        let ge = g.reshape(ge, &[b, 1, fg * ng, w]);
        let g_tokens = g.broadcast_to(ge, &[b, f, fg * ng, w]);
        let de = self.d_embed.forward(g, ud);
        let dpos: Vec<f64> = (0..nd).map(|i| i as f64).collect();
        let dpe = g.input(sinusoidal::<T>(&dpos, w));
        let d_tokens = g.add(de, dpe);
        if fd != f {
            return Err(Error::config(format!("detail stream has {fd} frames, latent has {f}")));
        }

        for (i, blk) in self.blocks.iter().enumerate() {
            let motion = match blk.kind {
                Kind::Global => g_tokens,
                Kind::Detail => d_tokens,
            };
            let m_len = g.shape(motion)[2];
            let s = g.concat(&[x, motion], 2);
            let mods = blk.ada.forward(g, cond);
            let mods = g.reshape(mods, &[b, 1, 1, 6 * w]);
            let chunk = |g: &mut Graph<T>, k: usize| g.narrow(mods, 3, k * w, w);
            let (sh1, sc1, ga1, sh2, sc2, ga2) =
                (chunk(g, 0), chunk(g, 1), chunk(g, 2), chunk(g, 3), chunk(g, 4), chunk(g, 5));
            let h = g.layer_norm(s, eps);
            let h = modulate(g, h, sh1, sc1);
            let h = g.reshape(h, &[b * f, l + m_len, w]);
            let a = blk.attn.forward(g, h, h);
            let a = g.reshape(a, &[b, f, l + m_len, w]);
            let a = g.mul(a, ga1);
            let s = g.add(s, a);
            let h = g.layer_norm(s, eps);
            let h = modulate(g, h, sh2, sc2);
            let m = blk.mlp.forward(g, h);
            let m = g.mul(m, ga2);
            let s = g.add(s, m);
            x = g.narrow(s, 2, 0, l);
            if i % 2 == 1 {
                x = self.tabs[i / 2].forward(g, x, cond);
            }
        }

        let mods = self.final_ada.forward(g, cond);
        let mods = g.reshape(mods, &[b, 1, 1, 2 * w]);
        let shift = g.narrow(mods, 3, 0, w);
        let scale = g.narrow(mods, 3, w, w);
        let h = g.layer_norm(x, eps);
        let h = modulate(g, h, shift, scale);
        let y = self.out.forward(g, h);
        let c = d.channels;
        let y = g.reshape(y, &[b, f, hp, wp, c, p, p]);
        let y = g.permute(y, &[0, 4, 1, 2, 5, 3, 6]);
        let y = g.reshape(y, &[b, c, f, d.height, d.width]);
        Ok(match self.cfg.output {
            OutputKind::Velocity => y,
            OutputKind::Sample => {
                let zt = g.input(interp.clone());
                let diff = g.sub(y, zt);
                let inv = Tensor::from_fn(&[b, 1, 1, 1, 1], |i| T::from_f64_lossy(1.0 / t[i[0]].max(self.cfg.t_min)));
                let inv = g.input(inv);
                g.mul(diff, inv)
            }
        })
    }

    /// Inference-mode velocity for fixed conditioning values.
    pub fn velocity<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        interp: &Tensor<T>,
        content: &Tensor<T>,
        u_g: Option<&Tensor<T>>,
        u_d: Option<&Tensor<T>>,
        t: f64,
    ) -> Result<Tensor<T>> {
        let b = interp.shape().first().copied().unwrap_or(0);
        let mut g = Graph::inference(store);
        let sg = u_g.map_or(Stream::Null, Stream::Value);
        let sd = u_d.map_or(Stream::Null, Stream::Value);
        let v = self.forward(&mut g, interp, Some(content), sg, sd, &vec![t; b])?;
        Ok(g.take(v))
    }
}

/// Guided velocity field of a trained decoder for one set of conditions.
pub struct GuidedField<'a, T: Scalar> {
    pub decoder: &'a FlowDecoder,
    pub store: &'a ParamStore<T>,
    pub content: &'a Tensor<T>,
    pub u_g: Option<&'a Tensor<T>>,
    pub u_d: Option<&'a Tensor<T>>,
    pub guidance: f64,
}

impl<T: Scalar> VelocityField<T> for GuidedField<'_, T> {
    fn velocity(&self, z: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let cond = || self.decoder.velocity(self.store, z, self.content, self.u_g, self.u_d, t);
        let uncond = || self.decoder.velocity(self.store, z, self.content, None, None, t);
        if self.guidance == 1.0 || (self.u_g.is_none() && self.u_d.is_none()) {
            cond()
        } else if self.guidance == 0.0 {
            uncond()
        } else {
            cfg_velocity(&cond()?, &uncond()?, self.guidance)
        }
    }
}

/// Conditions for [`decode_partial`].
pub struct DecodeRequest<'a, T> {
    pub content: &'a Tensor<T>,
    pub u_g: &'a Tensor<T>,
    pub u_d: &'a Tensor<T>,
    pub steps: usize,
    pub guidance: f64,
}

/// Sample a latent with the excluded motion stream replaced by its null tokens.
pub fn decode_partial<T: Scalar, R: Rng + ?Sized>(
    decoder: &FlowDecoder,
    store: &ParamStore<T>,
    mode: DecodeMode,
    req: &DecodeRequest<'_, T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let b = req.content.shape().first().copied().unwrap_or(0);
    let field = GuidedField {
        decoder,
        store,
        content: req.content,
        u_g: mode.uses_global().then_some(req.u_g),
        u_d: mode.uses_detail().then_some(req.u_d),
        guidance: req.guidance,
    };
    ode_sample(&field, &decoder.latent_shape(b), req.steps, rng)
}
