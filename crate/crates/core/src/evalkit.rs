//! Reconstruction metrics, compression-rate accounting, spectral energy
//! ratios, and an analytic transformer FLOP/memory counter.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::codec::VideoTensor;
use crate::error::{Error, Result};
use crate::motion::{DetailedMotionConfig, GlobalMotionConfig, LatentSize};
use crate::scalar::Scalar;
use crate::spectral::{band_energy, make_lowpass_mask, Cutoffs, MaskKind};
use crate::tensor::Tensor;

/// PSNR in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("psnr", x.shape(), y.shape()));
    }
    if x.is_empty() {
        return Err(Error::Precondition("psnr of empty tensors".into()));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Gaussian-weighted local mean with the window clipped at the borders and renormalized.
fn blur(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                let (mut acc, mut norm) = (0.0, 0.0);
                for (j, kv) in k.iter().enumerate() {
                    let p = pos as isize + j as isize - r as isize;
                    if p < 0 || p >= len as isize {
                        continue;
                    }
                    let idx = if horizontal { y * w + p as usize } else { p as usize * w + x };
                    acc += kv * src[idx];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Mean SSIM of two grayscale frames given as row-major `h x w` slices.
pub fn ssim_frame(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = blur(a, h, w, &k);
    let mu_b = blur(b, h, w, &k);
    let aa = blur(&prod(a, a), h, w, &k);
    let bb = blur(&prod(b, b), h, w, &k);
    let ab = blur(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (h * w) as f64
}

/// Mean SSIM over all clips and frames of `[B, C, F, H, W]` videos, after
/// converting to grayscale by channel mean.
pub fn ssim<T: Scalar>(x: &VideoTensor<T>, y: &VideoTensor<T>) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", &x.shape(), &y.shape()));
    }
    let [b, c, f, h, w] = x.shape();
    let gray = |v: &VideoTensor<T>, bi: usize, k: usize| -> Vec<f64> {
        let mut g = vec![0.0; h * w];
        for ch in 0..c {
            for (i, gv) in g.iter_mut().enumerate() {
                *gv += v.data.get(&[bi, ch, k, i / w, i % w]).to_f64_lossy();
            }
        }
        g.iter().map(|s| s / c as f64).collect()
    };
    let mut total = 0.0;
    for bi in 0..b {
        for k in 0..f {
            total += ssim_frame(&gray(x, bi, k), &gray(y, bi, k), h, w, 1.0);
        }
    }
    Ok(total / (b * f) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub latent_dims: u64,
    pub video_dims: u64,
    /// `100 * latent / video`, exact.
    #[serde(skip)]
    pub rate: Ratio<u64>,
    /// Rendered with two decimals.
    pub rate_percent: String,
}

/// Render a non-negative rational with `decimals` digits, truncating further digits.
pub fn render_truncated(r: Ratio<u64>, decimals: u32) -> String {
    let scale = 10u64.pow(decimals);
    let scaled = (r * scale).to_integer();
    format!("{}.{:0width$}", scaled / scale, scaled % scale, width = decimals as usize)
}

/// Downstream-latent share of the input dimensionality, as a percentage.
pub fn compression_rate(latent: u64, c: u64, f: u64, h: u64, w: u64) -> Result<CompressionReport> {
    if latent == 0 || c == 0 || f == 0 || h == 0 || w == 0 {
        return Err(Error::config("compression_rate needs positive sizes"));
    }
    let video = c * f * h * w;
    let rate = Ratio::new(100 * latent, video);
    Ok(CompressionReport { latent_dims: latent, video_dims: video, rate, rate_percent: render_truncated(rate, 2) })
}

/// `[c, f, h, w]` of the reference clip geometry used for tabulated rates.
pub const REFERENCE_VIDEO: [u64; 4] = [3, 16, 256, 256];

/// Compression rate of a motion latent size preset at the reference geometry.
pub fn preset_rate(size: LatentSize) -> Result<CompressionReport> {
    let [c, f, h, w] = REFERENCE_VIDEO;
    let (mut g, mut d) = (GlobalMotionConfig::default(), DetailedMotionConfig::default());
    size.apply(f as usize, &mut g, &mut d);
    let elems = g.latent_shape().iter().product::<usize>() + d.latent_shape().iter().product::<usize>();
    compression_rate(elems as u64, c, f, h, w)
}

/// Fraction of 3-D spectral energy of a video outside the low band, averaged
/// over clips and channels via the summed energies.
pub fn spectral_energy_ratio<T: Scalar>(x: &VideoTensor<T>, cutoffs: Cutoffs) -> Result<f64> {
    let [b, c, f, h, w] = x.shape();
    let mask = make_lowpass_mask::<f64>([c, f, h, w], cutoffs, MaskKind::BrickWall)?;
    let data: Tensor<f64> = x.data.cast();
    let (mut low, mut total) = (0.0, 0.0);
    for bi in 0..b {
        let (l, t) = band_energy(&data.index0(bi), &mask)?;
        low += l;
        total += t;
    }
    Ok(if total == 0.0 { 0.0 } else { ((total - low) / total).clamp(0.0, 1.0) })
}

/// Standardized transformer used for cost comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DitConfig {
    pub layers: u64,
    pub heads: u64,
    pub hidden: u64,
    pub ffn: u64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self { layers: 8, heads: 8, hidden: 512, ffn: 2048 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub tokens: u64,
    pub flops: u128,
    pub params: u128,
    pub activations: u128,
}

impl CostReport {
    pub fn memory_elements(&self) -> u128 {
        self.params + self.activations
    }
}

/// Analytic cost of one forward pass over `tokens` tokens for a single sample.
///
/// Per layer: projections `4 L d^2`, attention scores and mixing `2 L^2 d`,
/// feed-forward `2 * 2 L d d_ff`. Activations count the per-layer inputs of
/// every matmul plus the `heads x L x L` attention maps.
pub fn flops_and_memory(tokens: u64, cfg: &DitConfig) -> CostReport {
    let (l, d, ff, n) = (tokens as u128, cfg.hidden as u128, cfg.ffn as u128, cfg.layers as u128);
    let per_layer = 4 * l * d * d + 2 * l * l * d + 2 * 2 * l * d * ff;
    let params_layer = 4 * d * d + 2 * d * ff;
    let act_layer = 4 * l * d + cfg.heads as u128 * l * l + l * ff;
    CostReport { tokens, flops: n * per_layer, params: n * params_layer, activations: n * act_layer }
}
