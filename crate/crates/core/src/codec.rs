//! Frame autoencoder mapping pixel videos to the latent grid all motion modules work on.
//!
//! Non-overlapping `tf x s x s` pixel patches are mapped linearly to `c` latent
//! channels and back. Latents are standardized with a global scalar mean/std
//! measured on the training set after pre-training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::optim::{clip_grad_norm, lr_at, Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub spatial_factor: usize,
    pub temporal_factor: usize,
    pub latent_channels: usize,
    pub pixel_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { spatial_factor: 8, temporal_factor: 1, latent_channels: 16, pixel_channels: 3 }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_factor == 0 || !self.spatial_factor.is_power_of_two() {
            return Err(Error::config(format!("codec.spatial_factor must be a power of two, got {}", self.spatial_factor)));
        }
        if self.temporal_factor == 0 {
            return Err(Error::config("codec.temporal_factor must be positive"));
        }
        if self.latent_channels == 0 {
            return Err(Error::config("codec.latent_channels must be positive"));
        }
        if !matches!(self.pixel_channels, 1 | 3) {
            return Err(Error::config(format!("codec.pixel_channels must be 1 or 3, got {}", self.pixel_channels)));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.pixel_channels * self.temporal_factor * self.spatial_factor * self.spatial_factor
    }

    /// Latent `[B, c, f, h, w]` shape for a pixel `[B, C, F, H, W]` shape.
    pub fn latent_shape(&self, video: &[usize]) -> Result<[usize; 5]> {
        let [b, c, f, h, w] = five(video, "encode_frames")?;
        let (s, tf) = (self.spatial_factor, self.temporal_factor);
        if c != self.pixel_channels {
            return Err(Error::config(format!("video has {c} channels, codec expects {}", self.pixel_channels)));
        }
        if f % tf != 0 || h % s != 0 || w % s != 0 {
            return Err(Error::config(format!(
                "video dims F={f} H={h} W={w} not divisible by temporal {tf} / spatial {s} factors"
            )));
        }
        Ok([b, self.latent_channels, f / tf, h / s, w / s])
    }

    pub fn video_shape(&self, latent: &[usize]) -> Result<[usize; 5]> {
        let [b, c, f, h, w] = five(latent, "decode_frames")?;
        if c != self.latent_channels {
            return Err(Error::config(format!("latent has {c} channels, codec expects {}", self.latent_channels)));
        }
        let (s, tf) = (self.spatial_factor, self.temporal_factor);
        Ok([b, self.pixel_channels, f * tf, h * s, w * s])
    }
}

fn five(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape).map_err(|_| Error::shape(op, &[0, 0, 0, 0, 0], shape))
}

/// Pixel video `[B, C, F, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<T> {
    pub data: Tensor<T>,
    pub fps: f64,
}

impl<T: Scalar> VideoTensor<T> {
    pub fn new(data: Tensor<T>, fps: f64) -> Result<Self> {
        let [_, c, f, _, _] = five(data.shape(), "VideoTensor")?;
        if !matches!(c, 1 | 3) {
            return Err(Error::config(format!("video must have 1 or 3 channels, got {c}")));
        }
        if f < 2 {
            return Err(Error::config(format!("video needs at least 2 frames, got {f}")));
        }
        let (lo, hi) = (T::zero(), T::one());
        if let Some(bad) = data.data().iter().find(|v| !(**v >= lo && **v <= hi)) {
            return Err(Error::config(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { data, fps })
    }

    pub fn shape(&self) -> [usize; 5] {
        five(self.data.shape(), "VideoTensor").expect("validated at construction")
    }

    /// Single clip `b` as a batch of one.
    pub fn clip(&self, b: usize) -> Self {
        let one = self.data.narrow(0, b, 1);
        Self { data: one, fps: self.fps }
    }

    pub fn batch(clips: &[Self]) -> Result<Self> {
        let parts: Vec<&Tensor<T>> = clips.iter().map(|c| &c.data).collect();
        let data = Tensor::concat(&parts, 0)?;
        Ok(Self { data, fps: clips.first().map_or(8.0, |c| c.fps) })
    }
}

/// Standardized latent `[B, c, f, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor<T> {
    pub data: Tensor<T>,
}

impl<T: Scalar> LatentTensor<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        five(data.shape(), "LatentTensor")?;
        if !data.all_finite() {
            return Err(Error::Numerical("latent contains non-finite values".into()));
        }
        Ok(Self { data })
    }

    pub fn shape(&self) -> [usize; 5] {
        five(self.data.shape(), "LatentTensor").expect("validated at construction")
    }

    /// First latent frame `[B, c, h, w]`, the content latent.
    pub fn first_frame(&self) -> Tensor<T> {
        let [b, c, _, h, w] = self.shape();
        self.data.narrow(2, 0, 1).into_reshaped(&[b, c, h, w])
    }
}

#[derive(Clone, Debug)]
pub struct FrameCodec {
    pub cfg: CodecConfig,
    enc: Linear,
    dec: Linear,
    stat_mean: ParamId,
    stat_std: ParamId,
}

pub const NAMESPACE: &str = "codec.";

impl FrameCodec {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: CodecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_dim();
        let c = cfg.latent_channels;
        let enc = Linear::new(store, "codec.enc", p, c, true, rng);
        let dec = Linear::new(store, "codec.dec", c, p, true, rng);
        let stat_mean = store.add("codec.stats.mean", Tensor::zeros(&[1]));
        let stat_std = store.add("codec.stats.std", Tensor::ones(&[1]));
        Ok(Self { cfg, enc, dec, stat_mean, stat_std })
    }

    pub fn latent_stats<T: Scalar>(&self, store: &ParamStore<T>) -> (T, T) {
        (store.get(self.stat_mean).data()[0], store.get(self.stat_std).data()[0])
    }

    /// `[B, C, F, H, W]` -> `[B*f*h*w, C*tf*s*s]`.
    fn patchify<T: Scalar>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, [usize; 5])> {
        let ls = self.cfg.latent_shape(x.shape())?;
        let [b, _, f, h, w] = ls;
        let (s, tf, cp) = (self.cfg.spatial_factor, self.cfg.temporal_factor, self.cfg.pixel_channels);
        let t = x
            .reshape(&[b, cp, f, tf, h, s, w, s])?
            .permute(&[0, 2, 4, 6, 1, 3, 5, 7])
            .into_reshaped(&[b * f * h * w, self.cfg.patch_dim()]);
        Ok((t, ls))
    }

    fn unpatchify<T: Scalar>(&self, patches: Tensor<T>, latent: [usize; 5]) -> Tensor<T> {
        let [b, _, f, h, w] = latent;
        let (s, tf, cp) = (self.cfg.spatial_factor, self.cfg.temporal_factor, self.cfg.pixel_channels);
        patches
            .into_reshaped(&[b, f, h, w, cp, tf, s, s])
            .permute(&[0, 4, 1, 5, 2, 6, 3, 7])
            .into_reshaped(&[b, cp, f * tf, h * s, w * s])
    }

    /// Un-normalized latent rows `[B*f*h*w, c]` as a graph node.
    fn encode_rows<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<(Var, [usize; 5])> {
        let (patches, ls) = self.patchify(x)?;
        let p = g.input(patches);
        Ok((self.enc.forward(g, p), ls))
    }

    /// Reconstruction MSE in pixel space (before the output clamp).
    pub fn reconstruction_loss<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>) -> Result<Var> {
        let (patches, _) = self.patchify(x)?;
        let p = g.input(patches);
        let z = self.enc.forward(g, p);
        let y = self.dec.forward(g, z);
        let d = g.sub(y, p);
        let sq = g.square(d);
        Ok(g.mean(sq))
    }

    pub fn encode_frames<T: Scalar>(&self, store: &ParamStore<T>, x: &VideoTensor<T>) -> Result<LatentTensor<T>> {
        let mut g = Graph::inference(store);
        let (rows, ls) = self.encode_rows(&mut g, &x.data)?;
        let [b, c, f, h, w] = ls;
        let (mean, std) = self.latent_stats(store);
        let raw = g.take(rows);
        let z = raw
            .map(|v| (v - mean) / std)
            .into_reshaped(&[b, f, h, w, c])
            .permute(&[0, 4, 1, 2, 3]);
        LatentTensor::new(z)
    }

    pub fn decode_frames<T: Scalar>(&self, store: &ParamStore<T>, z: &LatentTensor<T>) -> Result<VideoTensor<T>> {
        self.cfg.video_shape(z.data.shape())?;
        let [b, c, f, h, w] = z.shape();
        let (mean, std) = self.latent_stats(store);
        let rows = z.data.permute(&[0, 2, 3, 4, 1]).into_reshaped(&[b * f * h * w, c]).map(|v| v * std + mean);
        let mut g = Graph::inference(store);
        let r = g.input(rows);
        let y = self.dec.forward(&mut g, r);
        let patches = g.take(y);
        let video = self.unpatchify(patches, [b, c, f, h, w]).map(|v| {
            let v = if v.is_nan() { T::zero() } else { v };
            v.max(T::zero()).min(T::one())
        });
        VideoTensor::new(video, 8.0)
    }

    /// Set encoder and decoder to the top principal directions of the pixel
    /// patches in `data` (decoder = transposed encoder, biases from the patch mean).
    ///
    /// Returns the fraction of patch variance the kept directions explain.
    pub fn init_pca<T: Scalar>(&self, store: &mut ParamStore<T>, data: &[VideoTensor<T>]) -> Result<f64> {
        let p = self.cfg.patch_dim();
        let c = self.cfg.latent_channels;
        if c > p {
            return Err(Error::config(format!("PCA init needs latent_channels ({c}) <= patch dim ({p})")));
        }
        let mut rows: Vec<f64> = Vec::new();
        for x in data {
            let (patches, _) = self.patchify(&x.data)?;
            rows.extend(patches.data().iter().map(|v| v.to_f64_lossy()));
        }
        let n = rows.len() / p;
        if n == 0 {
            return Err(Error::Precondition("PCA init needs a non-empty dataset".into()));
        }
        let x = nalgebra::DMatrix::from_row_slice(n, p, &rows);
        let mean = x.row_mean();
        let centered = nalgebra::DMatrix::from_fn(n, p, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / n as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let kept: f64 = order[..c].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum();
        let basis = |row: usize, col: usize| eig.eigenvectors[(row, order[col])];
        let enc_w = Tensor::from_fn(&[p, c], |i| T::from_f64_lossy(basis(i[0], i[1])));
        let dec_w = Tensor::from_fn(&[c, p], |i| T::from_f64_lossy(basis(i[1], i[0])));
        let enc_b = Tensor::from_fn(&[c], |i| T::from_f64_lossy(-(0..p).map(|r| mean[r] * basis(r, i[0])).sum::<f64>()));
        let dec_b = Tensor::from_fn(&[p], |i| T::from_f64_lossy(mean[i[0]]));
        *store.get_mut(self.enc.weight) = enc_w;
        *store.get_mut(self.dec.weight) = dec_w;
        if let Some(b) = self.enc.bias {
            *store.get_mut(b) = enc_b;
        }
        if let Some(b) = self.dec.bias {
            *store.get_mut(b) = dec_b;
        }
        Ok(if total > 0.0 { kept / total } else { 1.0 })
    }

    /// Measure and store the global latent mean/std over `data`.
    pub fn fit_latent_stats<T: Scalar>(&self, store: &mut ParamStore<T>, data: &[VideoTensor<T>]) -> Result<(f64, f64)> {
        let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
        for x in data {
            let mut g = Graph::inference(store);
            let (rows, _) = self.encode_rows(&mut g, &x.data)?;
            for &v in g.value(rows).data() {
                let v = v.to_f64_lossy();
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Precondition("latent statistics need a non-empty dataset".into()));
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).max(1e-12).sqrt();
        *store.get_mut(self.stat_mean) = Tensor::scalar(T::from_f64_lossy(mean)).into_reshaped(&[1]);
        *store.get_mut(self.stat_std) = Tensor::scalar(T::from_f64_lossy(std)).into_reshaped(&[1]);
        Ok((mean, std))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: usize,
    /// Start from the principal directions of the training patches.
    pub pca_init: bool,
    pub lr: f64,
    pub warmup: usize,
    pub clip: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self { steps: 2000, pca_init: true, lr: 1e-4, warmup: 0, clip: 1.0 }
    }
}

/// Stage 0: fit the frame autoencoder to `data` by pixel MSE, then store latent statistics.
///
/// Returns the per-step loss history.
pub fn pretrain_codec<T: Scalar>(
    codec: &FrameCodec,
    store: &mut ParamStore<T>,
    data: &[VideoTensor<T>],
    opts: &PretrainOptions,
    adam: AdamConfig,
) -> Result<Vec<f64>> {
    if opts.steps == 0 {
        return Err(Error::config("pretrain_codec needs steps >= 1"));
    }
    if data.is_empty() {
        return Err(Error::Precondition("pretrain_codec needs at least one clip".into()));
    }
    if opts.pca_init {
        codec.init_pca(store, data)?;
    }
    let batch = VideoTensor::batch(data)?;
    let mut opt = Adam::new(adam, store.len());
    let mut history = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (loss, mut grads) = {
            let mut g = Graph::new(store);
            let l = codec.reconstruction_loss(&mut g, &batch.data)?;
            (g.value(l).data()[0].to_f64_lossy(), g.backward(l))
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { phase: "stage0_codec".into(), step });
        }
        clip_grad_norm(&mut grads, opts.clip);
        opt.step(store, &grads, lr_at(step, opts.lr, opts.warmup, opts.steps));
        history.push(loss);
    }
    codec.fit_latent_stats(store, data)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: CodecConfig) -> (ParamStore<f32>, FrameCodec) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let codec = FrameCodec::new(&mut store, cfg, &mut rng).unwrap();
        (store, codec)
    }

    fn video(shape: &[usize]) -> VideoTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        VideoTensor::new(Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0)), 8.0).unwrap()
    }

    #[test]
    fn encode_shapes_follow_factors() {
        let cfg = CodecConfig { temporal_factor: 4, ..Default::default() };
        assert_eq!(cfg.latent_shape(&[1, 3, 16, 256, 256]).unwrap(), [1, 16, 4, 32, 32]);
        let (store, codec) = setup(CodecConfig::default());
        let z = codec.encode_frames(&store, &video(&[1, 3, 8, 64, 64])).unwrap();
        assert_eq!(z.shape(), [1, 16, 8, 8, 8]);
    }

    #[test]
    fn indivisible_video_is_a_config_error() {
        let cfg = CodecConfig { temporal_factor: 4, ..Default::default() };
        assert!(matches!(cfg.latent_shape(&[1, 3, 16, 250, 256]), Err(Error::Config(_))));
    }

    #[test]
    fn decode_inverts_shape_and_clamps() {
        let cfg = CodecConfig { temporal_factor: 4, ..Default::default() };
        assert_eq!(cfg.video_shape(&[1, 16, 4, 32, 32]).unwrap(), [1, 3, 16, 256, 256]);
        let (store, codec) = setup(CodecConfig::default());
        let z = LatentTensor::new(Tensor::zeros(&[1, 16, 2, 4, 4])).unwrap();
        let x = codec.decode_frames(&store, &z).unwrap();
        assert_eq!(x.shape(), [1, 3, 2, 32, 32]);
        assert!(x.data.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let z = LatentTensor::new(Tensor::full(&[1, 16, 2, 4, 4], 1e3)).unwrap();
        let x = codec.decode_frames(&store, &z).unwrap();
        assert!(x.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn round_trip_shape_and_determinism() {
        let cfg = CodecConfig { temporal_factor: 2, spatial_factor: 4, ..Default::default() };
        let (store, codec) = setup(cfg);
        let x = video(&[2, 3, 4, 16, 8]);
        let z1 = codec.encode_frames(&store, &x).unwrap();
        let z2 = codec.encode_frames(&store, &x).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(codec.decode_frames(&store, &z1).unwrap().shape(), x.shape());
    }

    #[test]
    fn pca_init_is_optimal_linear_codec() {
        let cfg = CodecConfig { spatial_factor: 2, latent_channels: 12, pixel_channels: 3, ..Default::default() };
        let (mut store, codec) = setup(cfg);
        let x = video(&[1, 3, 2, 4, 4]);
        let explained = codec.init_pca(&mut store, &[x.clone()]).unwrap();
        // Full rank: every patch is reproduced.
        assert!((explained - 1.0).abs() < 1e-6);
        let mut g = Graph::inference(&store);
        let l = codec.reconstruction_loss(&mut g, &x.data).unwrap();
        assert!(g.value(l).data()[0] < 1e-10);
    }

    #[test]
    fn video_invariants_enforced() {
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[1, 2, 4, 8, 8]), 8.0).is_err());
        assert!(VideoTensor::new(Tensor::<f32>::zeros(&[1, 3, 1, 8, 8]), 8.0).is_err());
        assert!(VideoTensor::new(Tensor::<f32>::full(&[1, 3, 2, 8, 8], 1.5), 8.0).is_err());
    }

    #[test]
    fn zero_steps_rejected() {
        let (mut store, codec) = setup(CodecConfig::default());
        let opts = PretrainOptions { steps: 0, ..Default::default() };
        let r = pretrain_codec(&codec, &mut store, &[video(&[1, 3, 2, 8, 8])], &opts, AdamConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn pretraining_reduces_loss_and_sets_stats() {
        let cfg = CodecConfig { spatial_factor: 4, latent_channels: 8, ..Default::default() };
        let (mut store, codec) = setup(cfg);
        let x = video(&[1, 3, 2, 8, 8]);
        let opts = PretrainOptions { steps: 300, lr: 1e-2, pca_init: false, ..Default::default() };
        let h = pretrain_codec(&codec, &mut store, &[x.clone()], &opts, AdamConfig::default()).unwrap();
        assert!(h.last().unwrap() < &h[0]);
        let z = codec.encode_frames(&store, &x).unwrap();
        assert!(z.data.mean().abs() < 1e-4);
        assert!((z.data.sum_sq() / z.data.len() as f32 - 1.0).abs() < 1e-3);
    }
}
