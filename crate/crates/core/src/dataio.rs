//! Synthetic sprite videos, the `.hvae` tensor container, spatial tiling, and
//! image-directory ingestion.
//!
//! # Container layout
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"HVAE"
//! 4       4     version, u32 little-endian (currently 1)
//! 8       8     header length N, u64 little-endian
//! 16      N     UTF-8 JSON header
//! 16+N    ...   payload: tensors back to back, C order, little-endian
//! ```
//!
//! The header is `{"tensors": [{"name", "dtype", "shape", "offset"}], "meta": {...}}`
//! where `offset` counts bytes from the start of the payload and `dtype` is
//! `"f32"`, `"f64"` or `"u8"`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::VideoTensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"HVAE";
pub const VERSION: u32 = 1;
const PREFIX: u64 = 16;

/// Parameters of one synthetic clip: a periodic textured background that
/// drifts (global motion) under Gaussian sprites that oscillate (detailed motion).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpriteSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    /// Background drift in px/frame as `(dx, dy)`; sprites ride along.
    pub drift: [f64; 2],
    pub sprite_count: usize,
    /// Oscillation frequency per sprite in cycles/frame (cycled if shorter than `sprite_count`).
    pub osc_freq: Vec<f64>,
    /// Oscillation amplitude per sprite in px (cycled likewise).
    pub osc_amp: Vec<f64>,
    /// Background texture frequency in cycles per frame width.
    pub texture_freq: f64,
    /// Sprite standard deviation in px.
    pub sprite_sigma: f64,
    pub seed: u64,
}

impl Default for SpriteSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            fps: 8.0,
            drift: [0.0, 0.0],
            sprite_count: 3,
            osc_freq: vec![0.0],
            osc_amp: vec![0.0],
            texture_freq: 2.0,
            sprite_sigma: 4.0,
            seed: 0,
        }
    }
}

impl SpriteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return Err(Error::config("sprite clip needs >= 2 frames and a non-empty frame"));
        }
        let max_drift = self.height.min(self.width) as f64 / 4.0;
        if self.drift.iter().any(|d| !d.is_finite() || d.abs() > max_drift) {
            return Err(Error::config(format!("drift must be finite and at most {max_drift} px/frame")));
        }
        if self.osc_freq.iter().any(|f| !(0.0..0.5).contains(f)) {
            return Err(Error::config("oscillation frequencies must lie in [0, 0.5) cycles/frame"));
        }
        if self.sprite_count > 0 && (self.osc_freq.is_empty() || self.osc_amp.is_empty()) {
            return Err(Error::config("osc_freq and osc_amp need at least one entry"));
        }
        let amp_limit = self.height.min(self.width) as f64 / 4.0;
        if self.osc_amp.iter().any(|a| !(0.0..=amp_limit).contains(a)) {
            return Err(Error::config(format!("oscillation amplitudes must lie in [0, {amp_limit}] px")));
        }
        let nyquist = self.width.min(self.height) as f64 / 2.0;
        if !(0.0..nyquist).contains(&self.texture_freq) {
            return Err(Error::config(format!("texture_freq must lie in [0, {nyquist})")));
        }
        if !(self.sprite_sigma > 0.0) {
            return Err(Error::config("sprite_sigma must be positive"));
        }
        Ok(())
    }
}

struct Sprite {
    x: f64,
    y: f64,
    dir: (f64, f64),
    phase: f64,
    freq: f64,
    amp: f64,
    color: [f64; 3],
}

/// Periodic signed distance along one axis.
fn wrap_delta(a: f64, b: f64, n: f64) -> f64 {
    let d = (a - b).rem_euclid(n);
    if d > n / 2.0 {
        d - n
    } else {
        d
    }
}

/// Render a `[1, 3, F, H, W]` clip. Deterministic in `spec.seed`.
pub fn synth_video<T: Scalar>(spec: &SpriteSpec) -> Result<VideoTensor<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let tex_phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let tex_base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let (kx, ky) = (
        (spec.texture_freq * theta.cos()).round() / w,
        (spec.texture_freq * theta.sin()).round() / h,
    );
    let sprites: Vec<Sprite> = (0..spec.sprite_count)
        .map(|i| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Sprite {
                x: rng.random_range(0.0..w),
                y: rng.random_range(0.0..h),
                dir: (a.cos(), a.sin()),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                freq: spec.osc_freq[i % spec.osc_freq.len()],
                amp: spec.osc_amp[i % spec.osc_amp.len()],
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            }
        })
        .collect();
    let two_sigma_sq = 2.0 * spec.sprite_sigma * spec.sprite_sigma;
    let (f, hh, ww) = (spec.frames, spec.height, spec.width);
    let mut data = vec![T::zero(); 3 * f * hh * ww];
    for k in 0..f {
        let (ox, oy) = (spec.drift[0] * k as f64, spec.drift[1] * k as f64);
        for y in 0..hh {
            for x in 0..ww {
                let (bx, by) = ((x as f64 - ox).rem_euclid(w), (y as f64 - oy).rem_euclid(h));
                let arg = std::f64::consts::TAU * (kx * bx + ky * by);
                let mut px: [f64; 3] = std::array::from_fn(|c| tex_base[c] + 0.2 * (arg + tex_phase[c]).sin());
                for s in &sprites {
                    let off = s.amp * (std::f64::consts::TAU * s.freq * k as f64 + s.phase).sin();
                    let (cx, cy) = (s.x + ox + off * s.dir.0, s.y + oy + off * s.dir.1);
                    let (dx, dy) = (wrap_delta(x as f64, cx, w), wrap_delta(y as f64, cy, h));
                    let alpha = 0.9 * (-(dx * dx + dy * dy) / two_sigma_sq).exp();
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - alpha) + s.color[c] * alpha;
                    }
                }
                for (c, v) in px.iter().enumerate() {
                    data[((c * f + k) * hh + y) * ww + x] = T::from_f64_lossy(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    VideoTensor::new(Tensor::new(&[1, 3, f, hh, ww], data)?, spec.fps)
}

/// Names of the canonical fixture clips, in order.
pub const FIXTURE_NAMES: [&str; 4] = ["static", "drift", "oscillation", "mixed"];

/// Specs of the four canonical 64x64x8 fixture clips.
pub fn fixture_specs() -> Vec<SpriteSpec> {
    let base = SpriteSpec::default();
    vec![
        SpriteSpec { seed: 101, ..base.clone() },
        SpriteSpec { seed: 202, drift: [2.0, 1.0], ..base.clone() },
        SpriteSpec { seed: 303, osc_freq: vec![0.25, 0.125, 0.375], osc_amp: vec![6.0, 5.0, 4.0], ..base.clone() },
        SpriteSpec {
            seed: 404,
            drift: [-1.0, 2.0],
            osc_freq: vec![0.375, 0.25, 0.125],
            osc_amp: vec![5.0, 6.0, 4.0],
            ..base
        },
    ]
}

/// The four fixture clips, each `[1, 3, 8, 64, 64]`.
pub fn fixtures<T: Scalar>() -> Result<Vec<VideoTensor<T>>> {
    fixture_specs().iter().map(synth_video).collect()
}

/// Raw array stored in a container.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().iter().map(|v| v.to_f64_lossy() as f32).collect()),
        }
    }

    /// Lossless for both scalar types.
    pub fn from_tensor_f64<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        }
    }

    /// Float view of the array; `u8` data maps to `[0, 1]` by `v / 255`.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64 / 255.0)).collect(),
        };
        Tensor::new(&self.shape, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn nbytes(&self) -> u64 {
        (numel(&self.shape) * self.dtype.size()) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    #[serde(skip)]
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: Value,
}

impl ContainerHeader {
    pub fn payload_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.offset + t.nbytes()).max().unwrap_or(0)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_container(path: impl AsRef<Path>, arrays: &[NamedArray], meta: &Value) -> Result<()> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(arrays.len());
    for a in arrays {
        if numel(&a.shape) != a.data.len() {
            return Err(Error::shape("write_container", &a.shape, &[a.data.len()]));
        }
        let entry = TensorEntry { name: a.name.clone(), dtype: a.data.dtype(), shape: a.shape.clone(), offset };
        offset += entry.nbytes();
        tensors.push(entry);
    }
    let header = serde_json::to_vec(&ContainerHeader { version: VERSION, tensors, meta: meta.clone() })?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for a in arrays {
        match &a.data {
            ArrayData::F32(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::F64(v) => {
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            ArrayData::U8(v) => out.write_all(v)?,
        }
    }
    out.flush()?;
    Ok(())
}

fn read_header_from(r: &mut impl Read) -> Result<ContainerHeader> {
    let mut prefix = [0u8; PREFIX as usize];
    r.read_exact(&mut prefix).map_err(|_| Error::Format("file shorter than the 16-byte container prefix".into()))?;
    if &prefix[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", &prefix[..4], MAGIC)));
    }
    let version = u32::from_le_bytes(prefix[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let len = u64::from_le_bytes(prefix[8..16].try_into().expect("8 bytes"));
    let mut buf = Vec::new();
    let got = r.take(len).read_to_end(&mut buf)? as u64;
    if got != len {
        return Err(Error::Truncated { expected: PREFIX + len, actual: PREFIX + got });
    }
    let mut header: ContainerHeader = serde_json::from_slice(&buf)?;
    header.version = version;
    Ok(header)
}

/// Parse only the header; the payload is not read.
pub fn read_header(path: impl AsRef<Path>) -> Result<ContainerHeader> {
    read_header_from(&mut BufReader::new(File::open(path)?))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<(ContainerHeader, Vec<NamedArray>)> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let need = header.payload_bytes();
    if (payload.len() as u64) < need {
        let start = file_len - payload.len() as u64;
        return Err(Error::Truncated { expected: start + need, actual: file_len });
    }
    let mut arrays = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let bytes = &payload[e.offset as usize..(e.offset + e.nbytes()) as usize];
        let data = match e.dtype {
            DType::F32 => ArrayData::F32(
                bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            ),
            DType::F64 => ArrayData::F64(
                bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
            DType::U8 => ArrayData::U8(bytes.to_vec()),
        };
        arrays.push(NamedArray { name: e.name.clone(), shape: e.shape.clone(), data });
    }
    Ok((header, arrays))
}

/// Store a video as tensor `"video"` with its fps in the metadata.
pub fn write_video<T: Scalar>(path: impl AsRef<Path>, x: &VideoTensor<T>, mut meta: Value) -> Result<()> {
    if !meta.is_object() {
        meta = Value::Object(Default::default());
    }
    meta["fps"] = Value::from(x.fps);
    write_container(path, &[NamedArray::from_tensor("video", &x.data)], &meta)
}

pub fn read_video<T: Scalar>(path: impl AsRef<Path>) -> Result<(VideoTensor<T>, Value)> {
    let (header, arrays) = read_container(path)?;
    let a = arrays
        .into_iter()
        .find(|a| a.name == "video")
        .ok_or_else(|| Error::Format("container has no \"video\" tensor".into()))?;
    let mut t = a.to_tensor::<T>()?;
    if t.rank() == 4 {
        let s = t.shape().to_vec();
        t = t.reshape(&[1, s[0], s[1], s[2], s[3]])?;
    }
    let fps = header.meta.get("fps").and_then(Value::as_f64).unwrap_or(8.0);
    Ok((VideoTensor::new(t, fps)?, header.meta))
}

/// Grid placement of tiles produced by [`tile_split`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub rows: usize,
    pub cols: usize,
    pub tile_h: usize,
    pub tile_w: usize,
}

/// Cut every frame into non-overlapping `tile_h x tile_w` tiles, row-major.
pub fn tile_split<T: Scalar>(x: &VideoTensor<T>, tile_h: usize, tile_w: usize) -> Result<(Vec<VideoTensor<T>>, TileLayout)> {
    let [_, _, _, h, w] = x.shape();
    if tile_h == 0 || tile_w == 0 || h % tile_h != 0 || w % tile_w != 0 {
        return Err(Error::config(format!("frame {h}x{w} is not divisible into {tile_h}x{tile_w} tiles")));
    }
    let layout = TileLayout { rows: h / tile_h, cols: w / tile_w, tile_h, tile_w };
    let mut tiles = Vec::with_capacity(layout.rows * layout.cols);
    for r in 0..layout.rows {
        let band = x.data.narrow(3, r * tile_h, tile_h);
        for c in 0..layout.cols {
            tiles.push(VideoTensor { data: band.narrow(4, c * tile_w, tile_w), fps: x.fps });
        }
    }
    Ok((tiles, layout))
}

pub fn tile_join<T: Scalar>(tiles: &[VideoTensor<T>], layout: &TileLayout) -> Result<VideoTensor<T>> {
    if tiles.len() != layout.rows * layout.cols {
        return Err(Error::config(format!("expected {} tiles, got {}", layout.rows * layout.cols, tiles.len())));
    }
    let want = [layout.tile_h, layout.tile_w];
    if let Some(bad) = tiles.iter().find(|t| t.shape()[3..] != want) {
        return Err(Error::shape("tile_join", &want, &bad.shape()[3..]));
    }
    let mut bands = Vec::with_capacity(layout.rows);
    for r in 0..layout.rows {
        let row: Vec<&Tensor<T>> = tiles[r * layout.cols..(r + 1) * layout.cols].iter().map(|t| &t.data).collect();
        bands.push(Tensor::concat(&row, 4)?);
    }
    let refs: Vec<&Tensor<T>> = bands.iter().collect();
    VideoTensor::new(Tensor::concat(&refs, 3)?, tiles[0].fps)
}

/// Load a directory of same-sized frame images (sorted by file name) as one RGB clip.
pub fn read_image_dir<T: Scalar>(dir: impl AsRef<Path>, fps: f64) -> Result<VideoTensor<T>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png"))
        })
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(Error::config(format!("{} holds {} PNG frames; need at least 2", dir.as_ref().display(), paths.len())));
    }
    let frames: Vec<image::RgbImage> = paths.iter().map(|p| image::open(p).map(|i| i.to_rgb8())).collect::<std::result::Result<_, _>>()?;
    let (w, h) = frames[0].dimensions();
    if let Some(bad) = frames.iter().position(|f| f.dimensions() != (w, h)) {
        return Err(Error::config(format!("frame {} has a different size", paths[bad].display())));
    }
    let (f, hh, ww) = (frames.len(), h as usize, w as usize);
    let data = Tensor::from_fn(&[1, 3, f, hh, ww], |i| {
        T::from_f64_lossy(frames[i[2]].get_pixel(i[4] as u32, i[3] as u32)[i[1]] as f64 / 255.0)
    });
    VideoTensor::new(data, fps)
}

/// Write each frame of clip `b` as `frame_0000.png`, ... into `dir`.
pub fn write_image_dir<T: Scalar>(dir: impl AsRef<Path>, x: &VideoTensor<T>, b: usize) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    let [_, c, f, h, w] = x.shape();
    for k in 0..f {
        let img = image::RgbImage::from_fn(w as u32, h as u32, |px, py| {
            image::Rgb(std::array::from_fn(|ch| {
                let v = x.data.get(&[b, if c == 1 { 0 } else { ch }, k, py as usize, px as usize]).to_f64_lossy();
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            }))
        });
        img.save(dir.as_ref().join(format!("frame_{k:04}.png")))?;
    }
    Ok(())
}
