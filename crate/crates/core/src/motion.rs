//! Hierarchical motion encoders.
//!
//! The global encoder compresses the low band of a latent with learnable
//! queries that cross-attend over every (spatially masked) latent token. The
//! detailed encoder appends learnable slots to each frame of the high band,
//! runs self-attention, and keeps only the slots. Both end in a Gaussian
//! posterior head.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{attention, learned, sinusoidal, sinusoidal_2d, Linear, Mlp, MultiHeadAttention, LN_EPS};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalMotionConfig {
    pub f_g: usize,
    pub n_g: usize,
    pub c_g: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the query stream.
    pub width: usize,
    pub mask_lo: f64,
    pub mask_hi: f64,
}

impl Default for GlobalMotionConfig {
    fn default() -> Self {
        Self { f_g: 4, n_g: 8, c_g: 8, layers: 4, heads: 4, width: 64, mask_lo: 0.30, mask_hi: 0.50 }
    }
}

impl GlobalMotionConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if frames % 2 != 0 || self.f_g * 2 != frames {
            return Err(Error::config(format!("global.f_g must be half the frame count ({frames}), got {}", self.f_g)));
        }
        if self.n_g == 0 || self.c_g == 0 || self.layers == 0 {
            return Err(Error::config("global.n_g, c_g and layers must be positive"));
        }
        check_heads("global", self.width, self.heads)?;
        if !(0.0 <= self.mask_lo && self.mask_lo <= self.mask_hi && self.mask_hi < 1.0) {
            return Err(Error::config(format!(
                "global mask range must satisfy 0 <= lo <= hi < 1, got [{}, {}]",
                self.mask_lo, self.mask_hi
            )));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.f_g, self.n_g, self.c_g]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetailedMotionConfig {
    pub f_d: usize,
    pub n_d: usize,
    pub c_d: usize,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
}

impl Default for DetailedMotionConfig {
    fn default() -> Self {
        Self { f_d: 8, n_d: 16, c_d: 16, layers: 4, heads: 4, width: 64 }
    }
}

impl DetailedMotionConfig {
    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.f_d != frames {
            return Err(Error::config(format!("detail.f_d must equal the frame count ({frames}), got {}", self.f_d)));
        }
        if self.n_d == 0 || self.c_d == 0 || self.layers == 0 {
            return Err(Error::config("detail.n_d, c_d and layers must be positive"));
        }
        check_heads("detail", self.width, self.heads)
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.f_d, self.n_d, self.c_d]
    }
}

fn check_heads(ns: &str, width: usize, heads: usize) -> Result<()> {
    if width == 0 || heads == 0 || width % heads != 0 {
        return Err(Error::config(format!("{ns}.width ({width}) must be a positive multiple of {ns}.heads ({heads})")));
    }
    Ok(())
}

/// Motion latent size presets (token count x channels per stream).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSize {
    Small,
    Normal,
    Large,
}

impl LatentSize {
    pub const ALL: [LatentSize; 3] = [LatentSize::Small, LatentSize::Normal, LatentSize::Large];

    /// `(n_g, c_g, n_d, c_d)`.
    pub fn dims(self) -> (usize, usize, usize, usize) {
        match self {
            LatentSize::Small => (8, 4, 16, 8),
            LatentSize::Normal => (8, 8, 16, 16),
            LatentSize::Large => (8, 8, 16, 32),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LatentSize::Small => "S",
            LatentSize::Normal => "normal",
            LatentSize::Large => "L",
        }
    }

    pub fn apply(self, frames: usize, global: &mut GlobalMotionConfig, detail: &mut DetailedMotionConfig) {
        let (n_g, c_g, n_d, c_d) = self.dims();
        global.f_g = frames / 2;
        global.n_g = n_g;
        global.c_g = c_g;
        detail.f_d = frames;
        detail.n_d = n_d;
        detail.c_d = c_d;
    }
}

/// Binary keep-mask over flattened spatial positions, shared by all frames and channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialMask {
    pub keep: Vec<bool>,
    pub ratio: f64,
}

impl SpatialMask {
    pub fn all_visible(hw: usize) -> Self {
        Self { keep: vec![true; hw], ratio: 0.0 }
    }

    pub fn masked_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

/// Draw a ratio uniformly from `[lo, hi]` and mask `round(ratio * hw)` positions
/// chosen uniformly without replacement.
pub fn sample_spatial_mask<R: Rng + ?Sized>(hw: usize, lo: f64, hi: f64, rng: &mut R) -> SpatialMask {
    let ratio = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let count = ((ratio * hw as f64).round() as usize).min(hw);
    let mut keep = vec![true; hw];
    for i in sample_indices(rng, hw, count).iter() {
        keep[i] = false;
    }
    SpatialMask { keep, ratio }
}

/// `mu + exp(logvar / 2) * eta` when stochastic, `mu` otherwise.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    rng: &mut R,
    stochastic: bool,
) -> Result<Tensor<T>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("reparameterize", mu.shape(), logvar.shape()));
    }
    if !stochastic {
        return Ok(mu.clone());
    }
    let eta = Tensor::<T>::randn(mu.shape(), rng);
    let half = T::from_f64_lossy(0.5);
    let std = logvar.map(|lv| (lv * half).exp());
    Ok(Tensor::from_vec(
        mu.shape(),
        mu.data().iter().zip(std.data()).zip(eta.data()).map(|((&m, &s), &e)| m + s * e).collect(),
    ))
}

/// Graph version of [`reparameterize`] with externally supplied noise.
pub fn reparameterize_graph<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, eta: Option<Tensor<T>>) -> Var {
    match eta {
        None => mu,
        Some(eta) => {
            let half = g.scale(logvar, T::from_f64_lossy(0.5));
            let std = g.exp(half);
            let e = g.input(eta);
            let noise = g.mul(std, e);
            g.add(mu, noise)
        }
    }
}

/// Gaussian posterior graph nodes, shaped `[B, frames, tokens, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
}

/// Single-head `softmax(q kv^T / sqrt(d)) kv` with identity projections.
///
/// `q: [L_q, d]`, `kv: [L_kv, d]`. This is the attention kernel the encoders
/// apply after their learned projections.
pub fn cross_attention<T: Scalar>(q: &Tensor<T>, kv: &Tensor<T>) -> Result<Tensor<T>> {
    if q.rank() != 2 || kv.rank() != 2 {
        return Err(Error::config("cross_attention takes rank-2 query and key/value tensors"));
    }
    let (lq, d) = (q.shape()[0], q.shape()[1]);
    let (lk, dk) = (kv.shape()[0], kv.shape()[1]);
    if d == 0 || lk == 0 {
        return Err(Error::config("cross_attention needs d > 0 and at least one key/value row"));
    }
    if dk != d {
        return Err(Error::shape("cross_attention", &[lk, d], kv.shape()));
    }
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let qv = g.input(q.reshape(&[1, lq, d])?);
    let kvv = g.input(kv.reshape(&[1, lk, d])?);
    let out = attention(&mut g, qv, kvv, kvv, 1);
    g.take(out).reshape(&[lq, d])
}

/// Gaussian posterior values plus the latent actually used downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    pub u: Tensor<T>,
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

/// Both motion streams of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionLatent<T> {
    pub global: Posterior<T>,
    pub detail: Posterior<T>,
}

impl<T: Scalar> Posterior<T> {
    /// A deterministic posterior at `u` (variance at the clamp floor).
    pub fn point(u: Tensor<T>) -> Self {
        let logvar = Tensor::full(u.shape(), T::from_f64_lossy(LOGVAR_MIN));
        Self { mu: u.clone(), u, logvar }
    }
}

impl<T: Scalar> MotionLatent<T> {
    pub fn from_values(u_g: Tensor<T>, u_d: Tensor<T>) -> Self {
        Self { global: Posterior::point(u_g), detail: Posterior::point(u_d) }
    }

    pub fn u_g(&self) -> &Tensor<T> {
        &self.global.u
    }

    pub fn u_d(&self) -> &Tensor<T> {
        &self.detail.u
    }

    pub fn is_finite(&self) -> bool {
        [&self.global, &self.detail]
            .iter()
            .all(|p| p.u.all_finite() && p.mu.all_finite() && p.logvar.all_finite())
    }
}

#[derive(Clone, Debug)]
struct PosteriorHead {
    norm_out: Linear,
    channels: usize,
}

impl PosteriorHead {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, width: usize, channels: usize, rng: &mut R) -> Self {
        Self { norm_out: Linear::new(store, name, width, 2 * channels, true, rng), channels }
    }

    /// `x: [B, f, n, width]` -> posterior `[B, f, n, channels]`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> PosteriorVars {
        let x = g.layer_norm(x, T::from_f64_lossy(LN_EPS));
        let y = self.norm_out.forward(g, x);
        let mu = g.narrow(y, 3, 0, self.channels);
        let lv = g.narrow(y, 3, self.channels, self.channels);
        let logvar = g.clamp(lv, T::from_f64_lossy(LOGVAR_MIN), T::from_f64_lossy(LOGVAR_MAX));
        PosteriorVars { mu, logvar }
    }
}

#[derive(Clone, Debug)]
struct CrossBlock {
    attn: MultiHeadAttention,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct GlobalMotionEncoder {
    pub cfg: GlobalMotionConfig,
    pub latent_channels: usize,
    kv_in: Linear,
    queries: ParamId,
    blocks: Vec<CrossBlock>,
    head: PosteriorHead,
}

pub const GLOBAL_NS: &str = "global.";
pub const DETAIL_NS: &str = "detail.";

impl GlobalMotionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: GlobalMotionConfig,
        latent_channels: usize,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        let kv_in = Linear::new(store, "global.kv_in", latent_channels, w, true, rng);
        let queries = learned(store, "global.queries", &[cfg.f_g * cfg.n_g, w], 0.02_f64.max(1.0 / (w as f64).sqrt()), rng);
        let blocks = (0..cfg.layers)
            .map(|i| CrossBlock {
                attn: MultiHeadAttention::new(store, &format!("global.block{i}.attn"), w, cfg.heads, rng),
                mlp: Mlp::new(store, &format!("global.block{i}.mlp"), w, 4 * w, rng),
            })
            .collect();
        let head = PosteriorHead::new(store, "global.head", w, cfg.c_g, rng);
        Self { cfg, latent_channels, kv_in, queries, blocks, head }
    }

    /// Access to the first block's attention for oracle tests.
    pub fn first_attention(&self) -> &MultiHeadAttention {
        &self.blocks[0].attn
    }

    pub fn queries_param(&self) -> ParamId {
        self.queries
    }

    /// Masked, spatially folded key/value tokens `[B, h*w*f, c]` with time index per token.
    fn tokens<T: Scalar>(&self, z_low: &Tensor<T>, masks: Option<&[SpatialMask]>) -> Result<(Tensor<T>, usize)> {
        let [b, c, f, h, w] = <[usize; 5]>::try_from(z_low.shape())
            .map_err(|_| Error::shape("global_motion_encode", &[0, self.latent_channels, 0, 0, 0], z_low.shape()))?;
        if c != self.latent_channels {
            return Err(Error::shape("global_motion_encode", &[b, self.latent_channels, f, h, w], z_low.shape()));
        }
        self.cfg.validate(f)?;
        let hw = h * w;
        if let Some(m) = masks {
            if m.len() != b || m.iter().any(|m| m.keep.len() != hw) {
                return Err(Error::config(format!("need {b} spatial masks of length {hw}")));
            }
        }
        // [B, c, f, hw] -> [B, hw, f, c]
        let mut t = z_low.reshape(&[b, c, f, hw])?.permute(&[0, 3, 2, 1]);
        if let Some(masks) = masks {
            let per_clip = hw * f * c;
            let per_pos = f * c;
            for (bi, m) in masks.iter().enumerate() {
                for (p, keep) in m.keep.iter().enumerate() {
                    if !keep {
                        let off = bi * per_clip + p * per_pos;
                        t.data_mut()[off..off + per_pos].fill(T::zero());
                    }
                }
            }
        }
        Ok((t.into_reshaped(&[b, hw * f, c]), f))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z_low: &Tensor<T>, masks: Option<&[SpatialMask]>) -> Result<PosteriorVars> {
        let (tokens, f) = self.tokens(z_low, masks)?;
        let b = tokens.shape()[0];
        let n_tok = tokens.shape()[1];
        let w = self.cfg.width;
        let eps = T::from_f64_lossy(LN_EPS);

        let times: Vec<f64> = (0..n_tok).map(|i| (i % f) as f64).collect();
        let pe = g.input(sinusoidal(&times, w));
        let x = g.input(tokens);
        let kv = self.kv_in.forward(g, x);
        let kv = g.add(kv, pe);

        let q0 = g.param(self.queries);
        let mut q = g.broadcast_to(q0, &[b, self.cfg.f_g * self.cfg.n_g, w]);
        for blk in &self.blocks {
            let qn = g.layer_norm(q, eps);
            let kn = g.layer_norm(kv, eps);
            let a = blk.attn.forward(g, qn, kn);
            q = g.add(q, a);
            let qn = g.layer_norm(q, eps);
            let m = blk.mlp.forward(g, qn);
            q = g.add(q, m);
        }
        let q = g.reshape(q, &[b, self.cfg.f_g, self.cfg.n_g, w]);
        Ok(self.head.forward(g, q))
    }
}

#[derive(Clone, Debug)]
struct SelfBlock {
    attn: MultiHeadAttention,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct DetailedMotionEncoder {
    pub cfg: DetailedMotionConfig,
    pub latent_channels: usize,
    tok_in: Linear,
    slots: ParamId,
    blocks: Vec<SelfBlock>,
    head: PosteriorHead,
}

impl DetailedMotionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: DetailedMotionConfig,
        latent_channels: usize,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        let tok_in = Linear::new(store, "detail.tok_in", latent_channels, w, true, rng);
        let slots = learned(store, "detail.slots", &[cfg.f_d, cfg.n_d, w], 1.0 / (w as f64).sqrt(), rng);
        let blocks = (0..cfg.layers)
            .map(|i| SelfBlock {
                attn: MultiHeadAttention::new(store, &format!("detail.block{i}.attn"), w, cfg.heads, rng),
                mlp: Mlp::new(store, &format!("detail.block{i}.mlp"), w, 4 * w, rng),
            })
            .collect();
        let head = PosteriorHead::new(store, "detail.head", w, cfg.c_d, rng);
        Self { cfg, latent_channels, tok_in, slots, blocks, head }
    }

    /// Per-frame token rows `[B*f, h*w, c]` of the high band.
    pub fn frame_tokens<T: Scalar>(&self, z_high: &Tensor<T>) -> Result<(Tensor<T>, [usize; 5])> {
        let s = <[usize; 5]>::try_from(z_high.shape())
            .map_err(|_| Error::shape("detailed_motion_encode", &[0, self.latent_channels, 0, 0, 0], z_high.shape()))?;
        let [b, c, f, h, w] = s;
        if c != self.latent_channels {
            return Err(Error::shape("detailed_motion_encode", &[b, self.latent_channels, f, h, w], z_high.shape()));
        }
        self.cfg.validate(f)?;
        let t = z_high.permute(&[0, 2, 3, 4, 1]).into_reshaped(&[b * f, h * w, c]);
        Ok((t, s))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z_high: &Tensor<T>) -> Result<PosteriorVars> {
        let (tokens, [b, _, f, h, w]) = self.frame_tokens(z_high)?;
        let pe = sinusoidal_2d::<T>(h, w, self.cfg.width);
        self.forward_tokens(g, tokens, pe, b, f)
    }

    /// Core of [`forward`](Self::forward) on explicit tokens and positional rows,
    /// so callers can reorder tokens together with their encodings.
    pub fn forward_tokens<T: Scalar>(&self, g: &mut Graph<T>, tokens: Tensor<T>, pos: Tensor<T>, b: usize, f: usize) -> Result<PosteriorVars> {
        let width = self.cfg.width;
        let n_d = self.cfg.n_d;
        let hw = tokens.shape()[1];
        if pos.shape() != [hw, width] {
            return Err(Error::shape("detailed_motion_encode", &[hw, width], pos.shape()));
        }
        let eps = T::from_f64_lossy(LN_EPS);
        let x = g.input(tokens);
        let x = self.tok_in.forward(g, x);
        let pe = g.input(pos);
        let x = g.add(x, pe);

        let slots = g.param(self.slots);
        let slots = g.broadcast_to(slots, &[b, f, n_d, width]);
        let slots = g.reshape(slots, &[b * f, n_d, width]);
        let slot_pos: Vec<f64> = (0..n_d).map(|j| (hw + j) as f64).collect();
        let spe = g.input(sinusoidal(&slot_pos, width));
        let slots = g.add(slots, spe);

        let mut x = g.concat(&[x, slots], 1);
        for blk in &self.blocks {
            let xn = g.layer_norm(x, eps);
            let a = blk.attn.forward(g, xn, xn);
            x = g.add(x, a);
            let xn = g.layer_norm(x, eps);
            let m = blk.mlp.forward(g, xn);
            x = g.add(x, m);
        }
        let out = g.narrow(x, 1, hw, n_d);
        let out = g.reshape(out, &[b, f, n_d, width]);
        Ok(self.head.forward(g, out))
    }
}

/// Evaluate a posterior and draw the latent.
pub fn posterior_values<T: Scalar, R: Rng + ?Sized>(
    g: &Graph<T>,
    vars: PosteriorVars,
    rng: &mut R,
    stochastic: bool,
) -> Result<Posterior<T>> {
    let mu = g.value(vars.mu).clone();
    let logvar = g.value(vars.logvar).clone();
    let u = reparameterize(&mu, &logvar, rng, stochastic)?;
    Ok(Posterior { u, mu, logvar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn mask_counts_on_64_positions() {
        let mut r = rng(11);
        for _ in 0..200 {
            let m = sample_spatial_mask(64, 0.30, 0.50, &mut r);
            let z = m.masked_count();
            assert!((19..=32).contains(&z), "masked {z}");
            assert!((0.30..=0.50).contains(&m.ratio));
            assert!((z as f64 - m.ratio * 64.0).abs() <= 1.0);
        }
    }

    #[test]
    fn mask_degenerate_and_deterministic() {
        let m = sample_spatial_mask(1, 0.30, 0.50, &mut rng(1));
        assert!(m.masked_count() <= 1);
        assert_eq!(sample_spatial_mask(64, 0.3, 0.5, &mut rng(4)), sample_spatial_mask(64, 0.3, 0.5, &mut rng(4)));
    }

    #[test]
    fn reparameterize_edge_cases() {
        let mu = Tensor::<f64>::from_fn(&[4, 3], |i| i[0] as f64 - i[1] as f64);
        let lv = Tensor::full(&[4, 3], LOGVAR_MIN);
        let s = reparameterize(&mu, &lv, &mut rng(2), true).unwrap();
        assert!(s.max_abs_diff(&mu) < 1e-6);
        let d = reparameterize(&mu, &Tensor::zeros(&[4, 3]), &mut rng(2), false).unwrap();
        assert_eq!(d, mu);
        assert!(reparameterize(&mu, &Tensor::zeros(&[3, 4]), &mut rng(2), true).is_err());
    }

    fn global_encoder(store: &mut ParamStore<f64>, frames: usize) -> GlobalMotionEncoder {
        let cfg = GlobalMotionConfig { f_g: frames / 2, n_g: 3, c_g: 2, layers: 2, heads: 2, width: 8, ..Default::default() };
        GlobalMotionEncoder::new(store, cfg, 4, &mut rng(0))
    }

    #[test]
    fn ones_mask_equals_no_mask_bitwise() {
        let mut store = ParamStore::new();
        let enc = global_encoder(&mut store, 4);
        let z = Tensor::<f64>::randn(&[2, 4, 4, 3, 3], &mut rng(8));
        let masks = vec![SpatialMask::all_visible(9); 2];
        let run = |m: Option<&[SpatialMask]>| {
            let mut g = Graph::inference(&store);
            let p = enc.forward(&mut g, &z, m).unwrap();
            g.value(p.mu).clone()
        };
        assert_eq!(run(None), run(Some(&masks)));
    }

    #[test]
    fn zero_input_gives_parameter_only_output() {
        let mut store = ParamStore::new();
        let enc = global_encoder(&mut store, 4);
        let z = Tensor::<f64>::zeros(&[1, 4, 4, 2, 2]);
        let mut masked = SpatialMask::all_visible(4);
        masked.keep[1] = false;
        let run = |m: Option<&[SpatialMask]>| {
            let mut g = Graph::inference(&store);
            let p = enc.forward(&mut g, &z, m).unwrap();
            g.value(p.mu).clone()
        };
        assert_eq!(run(None), run(Some(std::slice::from_ref(&masked))));
    }

    #[test]
    fn wrong_frame_count_rejected() {
        let mut store = ParamStore::new();
        let enc = global_encoder(&mut store, 4);
        let z = Tensor::<f64>::zeros(&[1, 4, 6, 2, 2]);
        let mut g = Graph::inference(&store);
        assert!(enc.forward(&mut g, &z, None).is_err());
    }

    #[test]
    fn masking_changes_output_for_generic_input() {
        let mut store = ParamStore::new();
        let enc = global_encoder(&mut store, 4);
        let z = Tensor::<f64>::randn(&[1, 4, 4, 3, 3], &mut rng(3));
        let m = sample_spatial_mask(9, 0.3, 0.5, &mut rng(5));
        let run = |m: Option<&[SpatialMask]>| {
            let mut g = Graph::inference(&store);
            let p = enc.forward(&mut g, &z, m).unwrap();
            g.value(p.mu).clone()
        };
        assert!(run(None).max_abs_diff(&run(Some(std::slice::from_ref(&m)))) > 1e-9);
    }
}
