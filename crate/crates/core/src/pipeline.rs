//! High-level glue shared by the command line and the acceptance suite.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::codec::VideoTensor;
use crate::config::RunConfig;
use crate::dataio::{fixtures, read_image_dir, read_video, FIXTURE_NAMES};
use crate::decoder::DecodeMode;
use crate::error::{Error, Result};
use crate::evalkit::{psnr, spectral_energy_ratio, ssim};
use crate::generator::{gen_sample, MotionGenerator, MotionPacker, NormStats};
use crate::model::{HiVae, ReconstructOptions};
use crate::motion::MotionLatent;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::{StageTag, TrainState};

/// Seed offsets so that initialization, training and sampling draw from separate streams.
pub const INIT_STREAM: u64 = 0x1000;
pub const TRAIN_STREAM: u64 = 0x2000;
pub const GEN_STREAM: u64 = 0x3000;

/// Class of each fixture for the generator: background-driven clips are 0, sprite-driven 1.
pub const FIXTURE_CLASSES: [usize; 4] = [0, 0, 1, 1];

/// Model plus a fresh training state, deterministic in `cfg.seed`.
pub fn build<T: Scalar>(cfg: &RunConfig) -> Result<(HiVae, TrainState<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
    let mut store = ParamStore::new();
    let model = HiVae::new(&mut store, cfg.model.clone(), &mut rng)?;
    Ok((model, TrainState::new(store, cfg.seed ^ TRAIN_STREAM)))
}

/// Rebuild the model described by a checkpoint and load its state.
pub fn restore<T: Scalar>(ck: Checkpoint<T>) -> Result<(HiVae, TrainState<T>, RunConfig)> {
    let cfg = ck.config.clone();
    let (model, fresh) = build::<T>(&cfg)?;
    let state = ck.into_state(fresh.store)?;
    Ok((model, state, cfg))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<(HiVae, TrainState<T>, RunConfig)> {
    restore(Checkpoint::load(path)?)
}

/// Training clips named by the config, or the fixture set when none are given.
pub fn training_data<T: Scalar>(cfg: &RunConfig) -> Result<Vec<VideoTensor<T>>> {
    if cfg.data.inputs.is_empty() {
        return fixtures();
    }
    let mut out = Vec::new();
    for p in &cfg.data.inputs {
        let v = load_video::<T>(p.to_string_lossy().as_ref(), cfg.data.fps)?;
        for b in 0..v.shape()[0] {
            out.push(v.clip(b));
        }
    }
    Ok(out)
}

/// `fixture:<name>`, a container file, or a directory of PNG frames.
pub fn load_video<T: Scalar>(spec: &str, fps: Option<f64>) -> Result<VideoTensor<T>> {
    if let Some(name) = spec.strip_prefix("fixture:") {
        let idx = FIXTURE_NAMES
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::config(format!("unknown fixture {name:?}; choose one of {FIXTURE_NAMES:?}")))?;
        return Ok(fixtures::<T>()?.swap_remove(idx));
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{spec}: no such file"))));
    }
    if path.is_dir() {
        read_image_dir(path, fps.unwrap_or(8.0))
    } else {
        Ok(read_video(path)?.0)
    }
}

/// Reconstruction quality of one clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub spectral_ratio: f64,
}

pub fn metrics<T: Scalar>(x: &VideoTensor<T>, y: &VideoTensor<T>, cfg: &RunConfig) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(&x.data, &y.data, 1.0)?,
        ssim: ssim(x, y)?,
        spectral_ratio: spectral_energy_ratio(y, cfg.model.spectral.cutoffs)?,
    })
}

/// Reconstruct `x` with a fixed sampling seed and score it.
pub fn reconstruct_scored<T: Scalar>(
    model: &HiVae,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    x: &VideoTensor<T>,
    opts: &ReconstructOptions,
    seed: u64,
) -> Result<(VideoTensor<T>, Metrics)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = model.reconstruct(store, x, opts, &mut rng)?;
    let m = metrics(x, &y, cfg)?;
    Ok((y, m))
}

/// Metrics of every clip under one decode mode.
#[allow(clippy::too_many_arguments)]
pub fn score_set<T: Scalar>(
    model: &HiVae,
    store: &ParamStore<T>,
    cfg: &RunConfig,
    data: &[VideoTensor<T>],
    mode: DecodeMode,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<Metrics>> {
    let opts = ReconstructOptions { mode, steps, guidance };
    data.iter().map(|x| reconstruct_scored(model, store, cfg, x, &opts, seed).map(|r| r.1)).collect()
}

pub fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len().max(1) as f64;
    Metrics {
        psnr: ms.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: ms.iter().map(|m| m.ssim).sum::<f64>() / n,
        spectral_ratio: ms.iter().map(|m| m.spectral_ratio).sum::<f64>() / n,
    }
}

/// Deterministic motion latents of every clip, stacked along the batch.
pub fn extract_motion<T: Scalar>(model: &HiVae, store: &ParamStore<T>, data: &[VideoTensor<T>]) -> Result<MotionLatent<T>> {
    let batch = VideoTensor::batch(data)?;
    let z = model.encode_latent(store, &batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    model.encode_motion(store, &z, &mut rng, false)
}

/// Generator bundle: network, packer, and their parameters.
pub struct GenBundle<T: Scalar> {
    pub generator: MotionGenerator,
    pub packer: MotionPacker,
    pub store: ParamStore<T>,
}

pub fn build_generator<T: Scalar>(cfg: &RunConfig) -> Result<GenBundle<T>> {
    let packer = MotionPacker::new(cfg.model.global.latent_shape(), cfg.model.detail.latent_shape(), cfg.gen.c_m, cfg.gen.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gen.seed ^ GEN_STREAM);
    let mut store = ParamStore::new();
    let generator = MotionGenerator::new(&mut store, cfg.gen.clone(), packer.packed_shape(), &mut rng)?;
    Ok(GenBundle { generator, packer, store })
}

/// Save a generator with its packer state in the checkpoint's extra field.
pub fn save_generator<T: Scalar>(path: impl AsRef<Path>, cfg: &RunConfig, bundle: &GenBundle<T>, log: &[f64]) -> Result<()> {
    let rng = ChaCha8Rng::seed_from_u64(cfg.gen.seed);
    let mut ck = Checkpoint::from_parts(cfg, None, &bundle.store, &rng, &Default::default());
    ck.extra = serde_json::json!({ "generator": true, "packer": bundle.packer, "loss": log });
    ck.save(path)
}

pub fn load_generator<T: Scalar>(path: impl AsRef<Path>) -> Result<(GenBundle<T>, RunConfig)> {
    let path = path.as_ref();
    let ck = Checkpoint::<T>::load(path)?;
    if ck.extra.get("generator").and_then(Value::as_bool) != Some(true) {
        return Err(Error::Format(format!("{} is not a generator checkpoint", path.display())));
    }
    let cfg = ck.config.clone();
    let mut bundle = build_generator::<T>(&cfg)?;
    bundle.packer = serde_json::from_value(ck.extra["packer"].clone())?;
    ck.restore_store(&mut bundle.store)?;
    Ok((bundle, cfg))
}

/// Sample motion for `class`, decode it with the first frame of `content_clip`.
pub fn generate_video<T: Scalar>(
    model: &HiVae,
    store: &ParamStore<T>,
    bundle: &GenBundle<T>,
    class: usize,
    content_clip: &VideoTensor<T>,
    guidance: f64,
    seed: u64,
) -> Result<(VideoTensor<T>, MotionLatent<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stats: NormStats = bundle.packer.stats;
    let packed = gen_sample(&bundle.generator, &bundle.store, Some(class), 1, guidance, stats, &mut rng)?;
    let motion = bundle.packer.unpack(&packed)?;
    if !motion.is_finite() {
        return Err(Error::Numerical("generated motion is not finite".into()));
    }
    let z = model.encode_latent(store, content_clip)?;
    let content: Tensor<T> = z.first_frame();
    let steps = model.cfg.decoder.infer_steps;
    let zh = model.decode_latent(store, &content, &motion, DecodeMode::Full, steps, 1.0, &mut rng)?;
    let mut video = model.codec.decode_frames(store, &zh)?;
    video.fps = content_clip.fps;
    Ok((video, motion))
}

/// Require a checkpoint to be at one of the `allowed` stages.
pub fn require_stage(stage: Option<StageTag>, allowed: &[StageTag], what: &str) -> Result<()> {
    match stage {
        Some(s) if allowed.contains(&s) => Ok(()),
        other => Err(Error::Precondition(format!(
            "{what} needs a checkpoint from stage {}, found {}",
            allowed.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" or "),
            other.map_or("none".into(), |s| s.to_string())
        ))),
    }
}
