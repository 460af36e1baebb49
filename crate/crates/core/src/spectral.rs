//! Spatio-temporal band splitting of latents with 3-D Fourier masks.
//!
//! A latent `[B, c, f, h, w]` (or `[c, f, h, w]`) is transformed over its last
//! three axes only; the channel axis is never mixed. Transforms are orthonormal
//! in both directions and are evaluated in `f64` whatever the storage scalar.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tolerated imaginary residue after the inverse transform.
pub const IMAG_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Cutoffs {
    #[serde(rename = "cutoff_f")]
    pub f: f64,
    #[serde(rename = "cutoff_h")]
    pub h: f64,
    #[serde(rename = "cutoff_w")]
    pub w: f64,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self { f: 0.25, h: 0.25, w: 0.25 }
    }
}

impl Cutoffs {
    pub fn uniform(v: f64) -> Self {
        Self { f: v, h: v, w: v }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("cutoff_f", self.f), ("cutoff_h", self.h), ("cutoff_w", self.w)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("spectral.{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Ideal separable mask with values in {0, 1}.
    #[default]
    BrickWall,
    /// Separable Gaussian roll-off; the cutoff acts as the standard deviation.
    Gaussian,
}

/// Low-pass mask over centered frequency bins of a `[c, f, h, w]` latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterMask<T> {
    pub cutoffs: Cutoffs,
    pub kind: MaskKind,
    values: Tensor<T>,
}

/// Normalized frequency (cycles per sample, in `[0, 0.5]`) of bin `k` on an axis of length `n`.
pub fn normalized_freq(k: usize, n: usize) -> f64 {
    let d = k.min(n - k);
    d as f64 / n as f64
}

fn axis_profile(n: usize, cutoff: f64, kind: MaskKind) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let nu = normalized_freq(k, n);
            match kind {
                MaskKind::BrickWall => {
                    if nu <= cutoff + 1e-12 {
                        1.0
                    } else {
                        0.0
                    }
                }
                MaskKind::Gaussian => (-0.5 * (nu / cutoff).powi(2)).exp(),
            }
        })
        .collect()
}

impl<T: Scalar> FilterMask<T> {
    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    /// The high-pass partner `1 - P`.
    pub fn complement(&self) -> Self {
        Self { cutoffs: self.cutoffs, kind: self.kind, values: self.values.map(|v| T::one() - v) }
    }
}

/// Separable low-pass mask: a bin survives iff its normalized frequency is
/// within the cutoff on each of the `f`, `h`, `w` axes. Identical across channels.
pub fn make_lowpass_mask<T: Scalar>(shape: [usize; 4], cutoffs: Cutoffs, kind: MaskKind) -> Result<FilterMask<T>> {
    cutoffs.validate()?;
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::config(format!("mask shape must be positive, got {shape:?}")));
    }
    let [c, f, h, w] = shape;
    let pf = axis_profile(f, cutoffs.f, kind);
    let ph = axis_profile(h, cutoffs.h, kind);
    let pw = axis_profile(w, cutoffs.w, kind);
    let values = Tensor::from_fn(&[c, f, h, w], |i| T::from_f64_lossy(pf[i[1]] * ph[i[2]] * pw[i[3]]));
    Ok(FilterMask { cutoffs, kind, values })
}

/// Complementary low/high parts of a latent; `low + high == z`.
#[derive(Clone, Debug)]
pub struct BandPair<T> {
    pub low: Tensor<T>,
    pub high: Tensor<T>,
}

/// In-place orthonormal 3-D DFT of a contiguous `[f, h, w]` block.
pub(crate) fn fft3d(buf: &mut [Complex<f64>], dims: [usize; 3], inverse: bool, planner: &mut FftPlanner<f64>) {
    let [f, h, w] = dims;
    let n = f * h * w;
    debug_assert_eq!(buf.len(), n);
    let plan = |planner: &mut FftPlanner<f64>, len: usize| {
        if inverse {
            planner.plan_fft_inverse(len)
        } else {
            planner.plan_fft_forward(len)
        }
    };
    // w: contiguous rows
    let p = plan(planner, w);
    for row in buf.chunks_mut(w) {
        p.process(row);
    }
    // h and f: gather strided lines
    for (len, stride, outer_stride, inner_count) in [(h, w, h * w, w), (f, h * w, n, h * w)] {
        if len == 1 {
            continue;
        }
        let p = plan(planner, len);
        let mut line = vec![Complex::new(0.0, 0.0); len];
        for base in (0..n).step_by(outer_stride) {
            for off in 0..inner_count {
                let start = base + off;
                for (j, v) in line.iter_mut().enumerate() {
                    *v = buf[start + j * stride];
                }
                p.process(&mut line);
                for (j, v) in line.iter().enumerate() {
                    buf[start + j * stride] = *v;
                }
            }
        }
    }
    let norm = 1.0 / (n as f64).sqrt();
    for v in buf.iter_mut() {
        *v *= norm;
    }
}

fn check_latent_shape(z: &[usize], mask: &[usize]) -> Result<usize> {
    let ok = match z.len() {
        4 => z == mask,
        5 => &z[1..] == mask,
        _ => false,
    };
    if !ok {
        return Err(Error::shape("split_bands", mask, z));
    }
    Ok(if z.len() == 5 { z[0] } else { 1 })
}

/// Multiply the spectrum of `z` by `mask` and return the real inverse transform.
pub fn apply_mask<T: Scalar>(z: &Tensor<T>, mask: &FilterMask<T>) -> Result<Tensor<T>> {
    let batch = check_latent_shape(z.shape(), mask.shape())?;
    let ms = mask.shape();
    let (c, dims) = (ms[0], [ms[1], ms[2], ms[3]]);
    let block = dims.iter().product::<usize>();
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(z.len());
    let mut buf = vec![Complex::new(0.0, 0.0); block];
    let mut worst = 0.0f64;
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * block;
            for (dst, &src) in buf.iter_mut().zip(&z.data()[off..off + block]) {
                *dst = Complex::new(src.to_f64_lossy(), 0.0);
            }
            fft3d(&mut buf, dims, false, &mut planner);
            for (v, &m) in buf.iter_mut().zip(&mask.values.data()[ch * block..(ch + 1) * block]) {
                *v *= m.to_f64_lossy();
            }
            fft3d(&mut buf, dims, true, &mut planner);
            for v in &buf {
                worst = worst.max(v.im.abs());
                out.push(T::from_f64_lossy(v.re));
            }
        }
    }
    if worst > IMAG_TOL {
        return Err(Error::Numerical(format!(
            "imaginary residue {worst:.3e} exceeds {IMAG_TOL:e}; mask is not Hermitian-symmetric"
        )));
    }
    Tensor::new(z.shape(), out)
}

/// Split `z` into `z_low = IFFT(FFT(z) * P)` and `z_high = IFFT(FFT(z) * (1 - P))`.
pub fn split_bands<T: Scalar>(z: &Tensor<T>, mask: &FilterMask<T>) -> Result<BandPair<T>> {
    let low = apply_mask(z, mask)?;
    let high = apply_mask(z, &mask.complement())?;
    Ok(BandPair { low, high })
}

/// Spectral energy `(inside, total)` of `x` under `mask`, with the mask applied
/// as a weight on `|X|^2`. `x` is `[c, f, h, w]` or `[B, c, f, h, w]`.
pub fn band_energy<T: Scalar>(x: &Tensor<T>, mask: &FilterMask<T>) -> Result<(f64, f64)> {
    let batch = check_latent_shape(x.shape(), mask.shape())?;
    let ms = mask.shape();
    let (c, dims) = (ms[0], [ms[1], ms[2], ms[3]]);
    let block = dims.iter().product::<usize>();
    let mut planner = FftPlanner::new();
    let mut buf = vec![Complex::new(0.0, 0.0); block];
    let (mut inside, mut total) = (0.0, 0.0);
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * block;
            for (dst, &src) in buf.iter_mut().zip(&x.data()[off..off + block]) {
                *dst = Complex::new(src.to_f64_lossy(), 0.0);
            }
            fft3d(&mut buf, dims, false, &mut planner);
            for (v, &m) in buf.iter().zip(&mask.values.data()[ch * block..(ch + 1) * block]) {
                let e = v.norm_sqr();
                inside += e * m.to_f64_lossy();
                total += e;
            }
        }
    }
    Ok((inside, total))
}

/// Band-split settings of a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    #[serde(flatten)]
    pub cutoffs: Cutoffs,
    #[serde(default)]
    pub kind: MaskKind,
}

impl SpectralConfig {
    pub fn mask<T: Scalar>(&self, shape: [usize; 4]) -> Result<FilterMask<T>> {
        make_lowpass_mask(shape, self.cutoffs, self.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(shape: [usize; 4], c: f64) -> FilterMask<f64> {
        make_lowpass_mask(shape, Cutoffs::uniform(c), MaskKind::BrickWall).unwrap()
    }

    #[test]
    fn full_cutoff_is_all_pass() {
        let m = mask([2, 8, 8, 8], 1.0);
        assert!(m.values().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quarter_cutoff_keeps_bins_within_two_of_dc() {
        let m = mask([1, 8, 8, 8], 0.25);
        // Independent enumeration: signed index k in -4..=3, kept iff |k| <= 2 on each axis.
        let signed = |k: usize| if k < 4 { k as i64 } else { k as i64 - 8 };
        for f in 0..8 {
            for h in 0..8 {
                for w in 0..8 {
                    let keep = [f, h, w].iter().all(|&k| signed(k).abs() <= 2);
                    assert_eq!(m.values().get(&[0, f, h, w]), if keep { 1.0 } else { 0.0 }, "bin {f},{h},{w}");
                }
            }
        }
        assert_eq!(m.values().sum(), 125.0);
    }

    #[test]
    fn mask_is_symmetric_under_negation_and_keeps_dc() {
        for kind in [MaskKind::BrickWall, MaskKind::Gaussian] {
            let m = make_lowpass_mask::<f64>([2, 6, 5, 8], Cutoffs { f: 0.2, h: 0.3, w: 0.1 }, kind).unwrap();
            let v = m.values();
            assert_eq!(v.get(&[1, 0, 0, 0]), 1.0);
            for f in 0..6 {
                for h in 0..5 {
                    for w in 0..8 {
                        let neg = [(6 - f) % 6, (5 - h) % 5, (8 - w) % 8];
                        assert_eq!(v.get(&[0, f, h, w]), v.get(&[0, neg[0], neg[1], neg[2]]));
                        assert!((0.0..=1.0).contains(&v.get(&[0, f, h, w])));
                    }
                }
            }
        }
    }

    #[test]
    fn bad_cutoffs_rejected() {
        for c in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(make_lowpass_mask::<f32>([1, 4, 4, 4], Cutoffs::uniform(c), MaskKind::BrickWall).is_err());
        }
    }

    #[test]
    fn constant_latent_is_pure_low_band() {
        let z = Tensor::<f64>::full(&[1, 2, 8, 8, 8], 0.7);
        let bands = split_bands(&z, &mask([2, 8, 8, 8], 0.25)).unwrap();
        assert!(bands.low.max_abs_diff(&z) < 1e-12);
        assert!(bands.high.max_abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let z = Tensor::<f64>::zeros(&[1, 2, 8, 8, 4]);
        assert!(split_bands(&z, &mask([2, 8, 8, 8], 0.25)).is_err());
    }

    #[test]
    fn asymmetric_mask_trips_residue_check() {
        let mut m = mask([1, 4, 4, 4], 1.0);
        m.values.set(&[0, 0, 0, 1], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f64>::randn(&[1, 4, 4, 4], &mut rng);
        assert!(matches!(apply_mask(&z, &m), Err(Error::Numerical(_))));
    }

    fn random_z(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[2, 3, 8, 8, 8], &mut rng)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn complement_swaps_outputs(seed in 0u64..1000, c in 0.05f64..1.0) {
            let z = random_z(seed);
            let m = mask([3, 8, 8, 8], c);
            let a = split_bands(&z, &m).unwrap();
            let b = split_bands(&z, &m.complement()).unwrap();
            prop_assert!(a.low.max_abs_diff(&b.high) < 1e-12);
            prop_assert!(a.high.max_abs_diff(&b.low) < 1e-12);
            let sum = a.low.add(&a.high).unwrap();
            prop_assert!(sum.max_abs_diff(&z) < 1e-5);
        }

        #[test]
        fn linear_in_input(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let (z1, z2) = (random_z(seed), random_z(seed + 7919));
            let m = mask([3, 8, 8, 8], 0.25);
            let mix = z1.scale(a).add(&z2.scale(b)).unwrap();
            let s = split_bands(&mix, &m).unwrap();
            let (s1, s2) = (split_bands(&z1, &m).unwrap(), split_bands(&z2, &m).unwrap());
            let want = s1.low.scale(a).add(&s2.low.scale(b)).unwrap();
            prop_assert!(s.low.max_abs_diff(&want) < 1e-5);
        }

        #[test]
        fn brickwall_energy_partitions(seed in 0u64..1000, c in 0.05f64..0.6) {
            let z = random_z(seed);
            let s = split_bands(&z, &mask([3, 8, 8, 8], c)).unwrap();
            let total = z.sum_sq();
            let parts = s.low.sum_sq() + s.high.sum_sq();
            prop_assert!((total - parts).abs() <= 1e-4 * total);
        }

        #[test]
        fn lowpass_is_idempotent(seed in 0u64..1000) {
            let z = random_z(seed);
            let m = mask([3, 8, 8, 8], 0.25);
            let low = apply_mask(&z, &m).unwrap();
            let again = apply_mask(&low, &m).unwrap();
            prop_assert!(again.max_abs_diff(&low) < 1e-5);
        }
    }
}
