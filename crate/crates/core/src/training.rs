//! Stage 0 (codec), stage 1 (global path on low-band targets), stage 2
//! (detailed path on full targets with the global encoder frozen), and the
//! single-stage joint baseline.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::{pretrain_codec, PretrainOptions, VideoTensor};
use crate::decoder::{noise_interp_batch, velocity_target, Stream};
use crate::error::{Error, Result};
use crate::model::HiVae;
use crate::motion::{reparameterize_graph, sample_spatial_mask, PosteriorVars, SpatialMask};
use crate::optim::{clip_grad_norm, lr_at, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub warmup_steps: usize,
    pub lambda_kl: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub clip_norm: f64,
    /// Sample motion latents with the reparameterization trick while training.
    pub stochastic_latents: bool,
    pub codec_steps: usize,
    pub codec_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: [0.9, 0.99],
            warmup_steps: 200,
            lambda_kl: 0.001,
            weight_decay: 1e-4,
            batch_size: 4,
            stage1_steps: 2000,
            stage2_steps: 2000,
            clip_norm: 1.0,
            stochastic_latents: true,
            codec_steps: 200,
            codec_lr: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_kl >= 0.0) {
            return Err(Error::config("train.lambda_kl must be >= 0"));
        }
        if !(self.lr > 0.0) || !(self.codec_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        for (name, steps) in [("stage1_steps", self.stage1_steps), ("stage2_steps", self.stage2_steps)] {
            if steps == 0 {
                return Err(Error::config(format!("train.{name} must be positive")));
            }
            if self.warmup_steps > steps {
                return Err(Error::config(format!("train.warmup_steps exceeds train.{name}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.betas[0], beta2: self.betas[1], eps: 1e-8, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage0Codec,
    Stage1Global,
    Stage2Full,
    /// Both encoders and the decoder trained jointly from stage 0 (ablation baseline).
    OneStage,
}

impl StageTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Stage0Codec => "stage0_codec",
            StageTag::Stage1Global => "stage1_global",
            StageTag::Stage2Full => "stage2_full",
            StageTag::OneStage => "one_stage",
        }
    }

    /// Whether the decoder can use the detailed stream.
    pub fn has_detail(self) -> bool {
        matches!(self, StageTag::Stage2Full | StageTag::OneStage)
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `mean(0.5 (mu^2 + exp(logvar) - 1 - logvar))` as a graph node.
pub fn kl_loss<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Var {
    let m2 = g.square(mu);
    let ev = g.exp(logvar);
    let s = g.add(m2, ev);
    let s = g.sub(s, logvar);
    let s = g.add_scalar(s, -T::one());
    let m = g.mean(s);
    g.scale(m, T::from_f64_lossy(0.5))
}

/// Plain-value KL of a diagonal Gaussian against the standard normal, averaged over elements.
pub fn kl_value<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("kl_loss", mu.shape(), logvar.shape()));
    }
    let n = mu.len().max(1) as f64;
    Ok(mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(m, l)| {
            let (m, l) = (m.to_f64_lossy(), l.to_f64_lossy());
            0.5 * (m * m + l.exp() - 1.0 - l)
        })
        .sum::<f64>()
        / n)
}

/// Mean squared error against a fixed target, as a graph node.
pub fn fm_loss<T: Scalar>(g: &mut Graph<T>, v_hat: Var, target: &Tensor<T>) -> Var {
    let t = g.input(target.clone());
    let d = g.sub(v_hat, t);
    let sq = g.square(d);
    g.mean(sq)
}

/// Plain-value flow-matching loss `mean((v_hat - (z - eps))^2)`.
pub fn fm_value<T: Scalar>(v_hat: &Tensor<T>, z: &Tensor<T>, eps: &Tensor<T>) -> Result<f64> {
    let v = velocity_target(z, eps)?;
    if v.shape() != v_hat.shape() {
        return Err(Error::shape("fm_loss", v.shape(), v_hat.shape()));
    }
    let n = v.len().max(1) as f64;
    Ok(v.data()
        .iter()
        .zip(v_hat.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: StageTag,
    pub fm_loss: f64,
    pub kl_loss: f64,
    /// Optimized objective `fm_loss + lambda_kl * kl_loss`.
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

/// Column order of the training CSV log.
pub const LOG_COLUMNS: [&str; 6] = ["step", "stage", "fm_loss", "kl_loss", "lr", "wall_time"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn stage(&self, stage: StageTag) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    /// Mean objective over the last `window` rows of `stage`.
    pub fn smoothed(&self, stage: StageTag, window: usize) -> Option<f64> {
        let rows: Vec<f64> = self.stage(stage).map(|r| r.total).collect();
        if rows.is_empty() || window == 0 {
            return None;
        }
        let tail = &rows[rows.len().saturating_sub(window)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Mean objective over the first `window` rows of `stage`.
    pub fn initial(&self, stage: StageTag, window: usize) -> Option<f64> {
        let rows: Vec<f64> = self.stage(stage).take(window).map(|r| r.total).collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Append rows to a CSV file, writing the header line first if the file is new or empty.
    pub fn append_csv(&self, path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
        let path = path.as_ref();
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{}", LOG_COLUMNS.join(","))?;
        }
        for r in rows {
            writeln!(f, "{},{},{:e},{:e},{:e},{:.3}", r.step, r.stage, r.fm_loss, r.kl_loss, r.lr, r.wall_time)?;
        }
        Ok(())
    }
}

/// Training latents precomputed with the frozen codec.
#[derive(Clone, Debug)]
pub struct LatentSet<T> {
    pub z: Tensor<T>,
    pub low: Tensor<T>,
    pub high: Tensor<T>,
    pub content: Tensor<T>,
}

impl<T: Scalar> LatentSet<T> {
    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of every field.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = idx.iter().map(|&i| t.narrow(0, i, 1)).collect();
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            Tensor::concat(&refs, 0)
        };
        Ok(Self { z: pick(&self.z)?, low: pick(&self.low)?, high: pick(&self.high)?, content: pick(&self.content)? })
    }
}

/// Parameters, stage, and loss history of one model being trained.
pub struct TrainState<T: Scalar> {
    pub store: ParamStore<T>,
    pub stage: Option<StageTag>,
    pub log: TrainLog,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(store: ParamStore<T>, seed: u64) -> Self {
        Self { store, stage: None, log: TrainLog::default(), rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Stage 0: fit and freeze the frame codec.
pub fn train_stage0<T: Scalar>(model: &HiVae, state: &mut TrainState<T>, data: &[VideoTensor<T>], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let opts = PretrainOptions { steps: cfg.codec_steps, lr: cfg.codec_lr, ..Default::default() };
    // The codec refines a closed-form solution; decay only pulls it away from the optimum.
    let adam = AdamConfig { weight_decay: 0.0, ..cfg.adam() };
    let history = pretrain_codec(&model.codec, &mut state.store, data, &opts, adam)?;
    state.store.set_frozen(crate::codec::NAMESPACE, true);
    state.stage = Some(StageTag::Stage0Codec);
    Ok(history)
}

/// Encode `data` with the frozen codec and split it into bands.
pub fn prepare_latents<T: Scalar>(model: &HiVae, store: &ParamStore<T>, data: &[VideoTensor<T>]) -> Result<LatentSet<T>> {
    if data.is_empty() {
        return Err(Error::Precondition("training needs at least one clip".into()));
    }
    let batch = VideoTensor::batch(data)?;
    let z = model.encode_latent(store, &batch)?;
    let bands = model.split(&z)?;
    Ok(LatentSet { content: z.first_frame(), z: z.data, low: bands.low, high: bands.high })
}

#[derive(Clone, Copy, Debug)]
struct Phase {
    tag: StageTag,
    steps: usize,
    low_target: bool,
    detail: bool,
    mask_global: bool,
}

/// One optimization step's random draws, all taken from the state rng in a fixed order.
struct Draws<T> {
    idx: Vec<usize>,
    t: Vec<f64>,
    eps: Tensor<T>,
    masks: Option<Vec<SpatialMask>>,
    keep: Vec<bool>,
    eta_g: Option<Tensor<T>>,
    eta_d: Option<Tensor<T>>,
}

fn draw<T: Scalar>(model: &HiVae, data: &LatentSet<T>, phase: Phase, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Draws<T> {
    let n = data.len();
    let b = cfg.batch_size.min(n);
    let idx = if b == n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, b).into_vec()
    };
    let t: Vec<f64> = (0..b).map(|_| rng.random_range(0.0..=1.0)).collect();
    let mut shape = data.z.shape().to_vec();
    shape[0] = b;
    let eps = Tensor::randn(&shape, rng);
    let [_, _, h, w] = model.cfg.latent_grid().expect("validated model");
    let masks = phase.mask_global.then(|| {
        (0..b).map(|_| sample_spatial_mask(h * w, model.cfg.global.mask_lo, model.cfg.global.mask_hi, rng)).collect()
    });
    let p = model.cfg.decoder.cfg_drop_prob;
    let keep = (0..b).map(|_| rng.random::<f64>() >= p).collect();
    let (g, d) = (model.cfg.global.latent_shape(), model.cfg.detail.latent_shape());
    let eta_g = cfg.stochastic_latents.then(|| Tensor::randn(&[b, g[0], g[1], g[2]], rng));
    let eta_d = (cfg.stochastic_latents && phase.detail).then(|| Tensor::randn(&[b, d[0], d[1], d[2]], rng));
    Draws { idx, t, eps, masks, keep, eta_g, eta_d }
}

/// Losses of one step: objective node plus the two reported parts.
struct StepLoss {
    total: Var,
    fm: f64,
    kl: f64,
}

fn step_loss<T: Scalar>(
    model: &HiVae,
    g: &mut Graph<T>,
    batch: &LatentSet<T>,
    draws: &Draws<T>,
    phase: Phase,
    lambda_kl: f64,
) -> Result<StepLoss> {
    let target = if phase.low_target { &batch.low } else { &batch.z };
    let interp = noise_interp_batch(target, &draws.eps, &draws.t)?;
    let v = velocity_target(target, &draws.eps)?;

    let post_g: PosteriorVars = model.global.forward(g, &batch.low, draws.masks.as_deref())?;
    let u_g = reparameterize_graph(g, post_g.mu, post_g.logvar, draws.eta_g.clone());
    let mut kl = kl_loss(g, post_g.mu, post_g.logvar);
    let sd = if phase.detail {
        let post_d = model.detail.forward(g, &batch.high)?;
        let u_d = reparameterize_graph(g, post_d.mu, post_d.logvar, draws.eta_d.clone());
        let kl_d = kl_loss(g, post_d.mu, post_d.logvar);
        kl = g.add(kl, kl_d);
        Stream::Var(u_d, Some(&draws.keep))
    } else {
        Stream::Null
    };
    let v_hat = model.decoder.forward(g, &interp, Some(&batch.content), Stream::Var(u_g, Some(&draws.keep)), sd, &draws.t)?;
    let fm = fm_loss(g, v_hat, &v);
    let weighted = g.scale(kl, T::from_f64_lossy(lambda_kl));
    let total = g.add(fm, weighted);
    let fm_v = g.value(fm).data()[0].to_f64_lossy();
    let kl_v = g.value(kl).data()[0].to_f64_lossy();
    Ok(StepLoss { total, fm: fm_v, kl: kl_v })
}

fn run_phase<T: Scalar>(model: &HiVae, state: &mut TrainState<T>, data: &LatentSet<T>, cfg: &TrainConfig, phase: Phase) -> Result<Vec<LogRow>> {
    let mut opt = Adam::new(cfg.adam(), state.store.len());
    let start = Instant::now();
    let mut rows = Vec::with_capacity(phase.steps);
    for step in 0..phase.steps {
        let draws = draw(model, data, phase, cfg, &mut state.rng);
        let batch = if draws.idx.len() == data.len() { data.clone() } else { data.select(&draws.idx)? };
        let (loss, mut grads) = {
            let mut g = Graph::new(&state.store);
            let l = step_loss(model, &mut g, &batch, &draws, phase, cfg.lambda_kl)?;
            let total = g.value(l.total).data()[0].to_f64_lossy();
            if !total.is_finite() {
                return Err(Error::Divergence { phase: phase.tag.to_string(), step });
            }
            ((l.fm, l.kl, total), g.backward(l.total))
        };
        clip_grad_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, cfg.lr, cfg.warmup_steps, phase.steps);
        opt.step(&mut state.store, &grads, lr);
        rows.push(LogRow {
            step,
            stage: phase.tag,
            fm_loss: loss.0,
            kl_loss: loss.1,
            total: loss.2,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    state.log.rows.extend(rows.iter().cloned());
    state.stage = Some(phase.tag);
    Ok(rows)
}

/// Stage 1: global encoder plus decoder on low-band targets with spatial masking;
/// the detailed stream is held at its null tokens.
pub fn train_stage1<T: Scalar>(model: &HiVae, state: &mut TrainState<T>, data: &LatentSet<T>, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    match state.stage {
        Some(StageTag::Stage0Codec) | Some(StageTag::Stage1Global) => {}
        other => {
            return Err(Error::Precondition(format!(
                "stage 1 needs a stage-0 codec checkpoint, found {}",
                other.map_or("none".to_string(), |s| s.to_string())
            )))
        }
    }
    let phase = Phase { tag: StageTag::Stage1Global, steps: cfg.stage1_steps, low_target: true, detail: false, mask_global: true };
    run_phase(model, state, data, cfg, phase)
}

/// Stage 2: freeze the global encoder and train the detailed encoder plus decoder on full targets.
pub fn train_stage2<T: Scalar>(model: &HiVae, state: &mut TrainState<T>, data: &LatentSet<T>, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if !matches!(state.stage, Some(StageTag::Stage1Global) | Some(StageTag::Stage2Full)) {
        return Err(Error::Precondition(format!(
            "stage 2 needs a stage-1 checkpoint, found {}",
            state.stage.map_or("none".to_string(), |s| s.to_string())
        )));
    }
    state.store.set_frozen(crate::motion::GLOBAL_NS, true);
    let phase = Phase { tag: StageTag::Stage2Full, steps: cfg.stage2_steps, low_target: false, detail: true, mask_global: false };
    run_phase(model, state, data, cfg, phase)
}

/// Ablation: train both encoders and the decoder jointly on full targets for
/// `stage1_steps + stage2_steps` steps, starting from the stage-0 codec.
pub fn train_one_stage<T: Scalar>(model: &HiVae, state: &mut TrainState<T>, data: &LatentSet<T>, cfg: &TrainConfig) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if state.stage != Some(StageTag::Stage0Codec) {
        return Err(Error::Precondition("the one-stage baseline starts from a stage-0 codec checkpoint".into()));
    }
    let steps = cfg.stage1_steps + cfg.stage2_steps;
    let phase = Phase { tag: StageTag::OneStage, steps, low_target: false, detail: true, mask_global: true };
    run_phase(model, state, data, cfg, phase)
}

/// Mean flow-matching loss of the current parameters on a fixed grid of times
/// with fixed noise; a low-variance progress measure.
pub fn eval_fm_loss<T: Scalar>(model: &HiVae, store: &ParamStore<T>, data: &LatentSet<T>, stage: StageTag, seed: u64, times: &[f64]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = data.len();
    let target = if stage == StageTag::Stage1Global { &data.low } else { &data.z };
    let mut g = Graph::inference(store);
    let pg = model.global.forward(&mut g, &data.low, None)?;
    let pd = if stage.has_detail() { Some(model.detail.forward(&mut g, &data.high)?) } else { None };
    let u_g = g.value(pg.mu).clone();
    let u_d = pd.map(|p| g.value(p.mu).clone());
    drop(g);
    let mut total = 0.0;
    for &t in times {
        let eps = Tensor::randn(target.shape(), &mut rng);
        let tt = vec![t; b];
        let interp = noise_interp_batch(target, &eps, &tt)?;
        let mut g = Graph::inference(store);
        let sd = u_d.as_ref().map_or(Stream::Null, Stream::Value);
        let v = model.decoder.forward(&mut g, &interp, Some(&data.content), Stream::Value(&u_g), sd, &tt)?;
        total += fm_value(g.value(v), target, &eps)?;
    }
    Ok(total / times.len().max(1) as f64)
}
