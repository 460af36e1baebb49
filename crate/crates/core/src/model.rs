//! The assembled hierarchical autoencoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, FrameCodec, LatentTensor, VideoTensor};
use crate::decoder::{decode_partial, DecodeMode, DecodeRequest, DecoderConfig, DecoderDims, FlowDecoder};
use crate::error::{Error, Result};
use crate::motion::{
    posterior_values, DetailedMotionConfig, DetailedMotionEncoder, GlobalMotionConfig, GlobalMotionEncoder, LatentSize,
    MotionLatent,
};
use crate::autograd::Graph;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::spectral::{split_bands, BandPair, FilterMask, SpectralConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Pixel frames per clip.
    pub frames: usize,
    /// Pixel height.
    pub height: usize,
    /// Pixel width.
    pub width: usize,
    pub codec: CodecConfig,
    pub spectral: SpectralConfig,
    pub global: GlobalMotionConfig,
    pub detail: DetailedMotionConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64x64x8 RGB clips with the normal motion latent size.
    pub fn desk() -> Self {
        let mut cfg = Self {
            frames: 8,
            height: 64,
            width: 64,
            codec: CodecConfig::default(),
            spectral: SpectralConfig::default(),
            global: GlobalMotionConfig { layers: 2, heads: 4, width: 64, ..Default::default() },
            detail: DetailedMotionConfig { layers: 2, heads: 4, width: 32, ..Default::default() },
            decoder: DecoderConfig { layers: 4, ..Default::default() },
        };
        cfg.set_latent_size(LatentSize::Normal);
        cfg
    }

    /// Tiny model for gradient checks and fast tests: 16x16 pixels, 4 frames, 2x2x4 latent grid.
    pub fn micro() -> Self {
        Self {
            frames: 4,
            height: 16,
            width: 16,
            codec: CodecConfig { spatial_factor: 8, temporal_factor: 1, latent_channels: 4, pixel_channels: 3 },
            spectral: SpectralConfig::default(),
            global: GlobalMotionConfig { f_g: 2, n_g: 2, c_g: 3, layers: 2, heads: 2, width: 8, ..Default::default() },
            detail: DetailedMotionConfig { f_d: 4, n_d: 2, c_d: 3, layers: 2, heads: 2, width: 8 },
            decoder: DecoderConfig { layers: 2, heads: 2, width: 16, patch: 1, ..Default::default() },
        }
    }

    pub fn set_latent_size(&mut self, size: LatentSize) {
        size.apply(self.frames, &mut self.global, &mut self.detail);
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.spectral.cutoffs.validate()?;
        self.global.validate(self.frames)?;
        self.detail.validate(self.frames)?;
        self.decoder.validate()?;
        if self.codec.temporal_factor != 1 {
            return Err(Error::config("motion encoders count pixel frames; codec.temporal_factor must be 1"));
        }
        self.latent_grid().map(|_| ())
    }

    /// `[c, f, h, w]` of one clip's latent.
    pub fn latent_grid(&self) -> Result<[usize; 4]> {
        let [_, c, f, h, w] = self.codec.latent_shape(&[1, self.codec.pixel_channels, self.frames, self.height, self.width])?;
        Ok([c, f, h, w])
    }

    pub fn video_shape(&self, batch: usize) -> [usize; 5] {
        [batch, self.codec.pixel_channels, self.frames, self.height, self.width]
    }

    /// Element count of the motion latent passed downstream (content latent excluded).
    pub fn motion_elements(&self) -> usize {
        let g = self.global.latent_shape();
        let d = self.detail.latent_shape();
        g.iter().product::<usize>() + d.iter().product::<usize>()
    }
}

#[derive(Clone, Debug)]
pub struct HiVae {
    pub cfg: ModelConfig,
    pub codec: FrameCodec,
    pub global: GlobalMotionEncoder,
    pub detail: DetailedMotionEncoder,
    pub decoder: FlowDecoder,
}

impl HiVae {
    /// Build all modules, registering parameters in a fixed order.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let [c, f, h, w] = cfg.latent_grid()?;
        let codec = FrameCodec::new(store, cfg.codec.clone(), rng)?;
        let global = GlobalMotionEncoder::new(store, cfg.global.clone(), c, rng);
        let detail = DetailedMotionEncoder::new(store, cfg.detail.clone(), c, rng);
        let dims = DecoderDims {
            channels: c,
            frames: f,
            height: h,
            width: w,
            global: cfg.global.latent_shape(),
            detail: cfg.detail.latent_shape(),
        };
        let decoder = FlowDecoder::new(store, cfg.decoder.clone(), dims, rng)?;
        Ok(Self { cfg, codec, global, detail, decoder })
    }

    pub fn mask<T: Scalar>(&self) -> Result<FilterMask<T>> {
        self.cfg.spectral.mask(self.cfg.latent_grid()?)
    }

    pub fn encode_latent<T: Scalar>(&self, store: &ParamStore<T>, x: &VideoTensor<T>) -> Result<LatentTensor<T>> {
        self.codec.encode_frames(store, x)
    }

    pub fn split<T: Scalar>(&self, z: &LatentTensor<T>) -> Result<BandPair<T>> {
        split_bands(&z.data, &self.mask()?)
    }

    /// Motion latents of a standardized latent batch, without spatial masking.
    pub fn encode_motion<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        z: &LatentTensor<T>,
        rng: &mut R,
        stochastic: bool,
    ) -> Result<MotionLatent<T>> {
        let bands = self.split(z)?;
        let mut g = Graph::inference(store);
        let pg = self.global.forward(&mut g, &bands.low, None)?;
        let pd = self.detail.forward(&mut g, &bands.high)?;
        let global = posterior_values(&g, pg, rng, stochastic)?;
        let detail = posterior_values(&g, pd, rng, stochastic)?;
        Ok(MotionLatent { global, detail })
    }

    /// Sample a latent batch from motion latents and a `[B, c, h, w]` content latent.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_latent<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        content: &Tensor<T>,
        motion: &MotionLatent<T>,
        mode: DecodeMode,
        steps: usize,
        guidance: f64,
        rng: &mut R,
    ) -> Result<LatentTensor<T>> {
        let req = DecodeRequest { content, u_g: motion.u_g(), u_d: motion.u_d(), steps, guidance };
        LatentTensor::new(decode_partial(&self.decoder, store, mode, &req, rng)?)
    }

    /// Encode, compress to motion latents, and decode back to pixels.
    pub fn reconstruct<T: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<T>,
        x: &VideoTensor<T>,
        opts: &ReconstructOptions,
        rng: &mut R,
    ) -> Result<VideoTensor<T>> {
        let z = self.encode_latent(store, x)?;
        let motion = self.encode_motion(store, &z, rng, false)?;
        let zh = self.decode_latent(store, &z.first_frame(), &motion, opts.mode, opts.steps, opts.guidance, rng)?;
        let mut out = self.codec.decode_frames(store, &zh)?;
        out.fps = x.fps;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    pub mode: DecodeMode,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self { mode: DecodeMode::Full, steps: 20, guidance: 1.0 }
    }
}
