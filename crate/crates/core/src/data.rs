//! Hyperspectral cubes: binary I/O, bicubic resampling, patch extraction,
//! dataset splitting, and synthetic linear-mixing scenes.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CUBE_MAGIC: &[u8; 4] = b"HSI1";

/// Tolerance when checking that values lie in `[0, 1]`.
const RANGE_TOL: f32 = 1e-6;

/// An `H×W×B` image with values in `[0, 1]`, stored band-sequentially
/// (band-major, then row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub name: String,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>, name: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Config(format!("cube extents must be positive, got {height}×{width}×{bands}")));
        }
        if values.len() != height * width * bands {
            return Err(Error::dim(
                "values",
                format!("{height}×{width}×{bands} cube needs {} values, got {}", height * width * bands, values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(v)) {
            return Err(Error::Domain(format!("value {} at index {i} outside [0, 1]", values[i])));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
            name: name.into(),
        })
    }

    pub fn at(&self, band: usize, row: usize, col: usize) -> f32 {
        self.values[(band * self.height + row) * self.width + col]
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.values[band * n..(band + 1) * n]
    }

    /// `B×H×W` tensor of the same values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.bands, self.height, self.width],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("cube invariant")
    }

    /// Builds a cube from a `B×H×W` (or `1×B×H×W`) tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor, name: impl Into<String>) -> Result<Self> {
        let (b, h, w) = match t.shape() {
            &[b, h, w] | &[1, b, h, w] => (b, h, w),
            s => return Err(Error::dim("rank", format!("expected B×H×W, got {s:?}"))),
        };
        let values = t.data().iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
        HsiCube::new(h, w, b, values, name)
    }

    /// Rectangular crop covering all bands.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.height || col + w > self.width {
            return Err(Error::dim(
                "crop",
                format!("{h}×{w} at ({row},{col}) exceeds {}×{}", self.height, self.width),
            ));
        }
        let mut values = Vec::with_capacity(h * w * self.bands);
        for b in 0..self.bands {
            for r in row..row + h {
                let start = (b * self.height + r) * self.width + col;
                values.extend_from_slice(&self.values[start..start + w]);
            }
        }
        HsiCube::new(h, w, self.bands, values, self.name.clone())
    }
}

pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let name = cube.name.as_bytes();
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Config("cube name longer than 65535 bytes".into()))?;
    let mut buf = Vec::with_capacity(18 + name.len() + 4 * cube.values.len());
    buf.extend_from_slice(CUBE_MAGIC);
    for v in [cube.height, cube.width, cube.bands] {
        let v = u32::try_from(v).map_err(|_| Error::Config(format!("extent {v} does not fit in u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&name_len.to_le_bytes());
    buf.extend_from_slice(name);
    for v in &cube.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    let need = |at: usize, n: usize, what: &str| -> Result<()> {
        if bytes.len() < at + n {
            Err(Error::format(
                at as u64,
                format!("truncated {what}: need {n} bytes, {} available", bytes.len().saturating_sub(at)),
            ))
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &bytes[..4] != CUBE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HSI1\""));
    }
    need(4, 14, "header")?;
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, b) = (u32_at(4), u32_at(8), u32_at(12));
    if h == 0 || w == 0 || b == 0 {
        return Err(Error::format(4, format!("zero extent in {h}×{w}×{b}")));
    }
    let name_len = u16::from_le_bytes([bytes[16], bytes[17]]) as usize;
    need(18, name_len, "name")?;
    let name = std::str::from_utf8(&bytes[18..18 + name_len])
        .map_err(|_| Error::format(18, "cube name is not utf-8"))?
        .to_owned();
    let start = 18 + name_len;
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(b))
        .ok_or_else(|| Error::format(4, "extent product overflows"))?;
    need(start, count * 4, "payload")?;
    if bytes.len() != start + count * 4 {
        return Err(Error::format((start + count * 4) as u64, "trailing bytes after payload"));
    }
    let mut values = Vec::with_capacity(count);
    for (i, c) in bytes[start..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format((start + 4 * i) as u64, format!("value {v} outside [0, 1]")));
        }
        values.push(v);
    }
    HsiCube::new(h, w, b, values, name)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cube(cube)?)?;
    Ok(())
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    decode_cube(&fs::read(path)?)
}

/// Reads a headerless band-sequential little-endian `f32` file.
pub fn load_raw(path: impl AsRef<Path>, height: usize, width: usize, bands: usize) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let count = height * width * bands;
    if bytes.len() != count * 4 {
        return Err(Error::format(
            bytes.len().min(count * 4) as u64,
            format!("raw file holds {} bytes, {height}×{width}×{bands} needs {}", bytes.len(), count * 4),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::format((4 * i) as u64, format!("value {v} outside [0, 1]")));
        }
        values.push(v);
    }
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("raw");
    HsiCube::new(height, width, bands, values, name)
}

/// Cubic convolution kernel with `a = −0.5`.
pub fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection of `i` into `0..n` (`-1 → 0`, `n → n−1`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Four taps `(index, weight)` for output position `dst` when resampling
/// `in_len` samples to `out_len` with half-pixel centers.
pub fn bicubic_taps(dst: usize, in_len: usize, out_len: usize) -> [(usize, f64); 4] {
    let src = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let base = src.floor();
    let t = src - base;
    let base = base as isize;
    let mut taps = [(0, 0.0); 4];
    for (j, tap) in taps.iter_mut().enumerate() {
        let off = j as isize - 1;
        *tap = (reflect(base + off, in_len), cubic_weight(t - off as f64));
    }
    taps
}

/// Separable bicubic resampling of every band, clamped to `[0, 1]`.
pub fn bicubic_resize(cube: &HsiCube, out_h: usize, out_w: usize) -> Result<HsiCube> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config(format!("output extents must be positive, got {out_h}×{out_w}")));
    }
    let (h, w) = (cube.height, cube.width);
    let col_taps: Vec<_> = (0..out_w).map(|x| bicubic_taps(x, w, out_w)).collect();
    let row_taps: Vec<_> = (0..out_h).map(|y| bicubic_taps(y, h, out_h)).collect();
    let mut values = Vec::with_capacity(out_h * out_w * cube.bands);
    let mut horiz = vec![0.0f64; h * out_w];
    for b in 0..cube.bands {
        let band = cube.band(b);
        for r in 0..h {
            for (x, taps) in col_taps.iter().enumerate() {
                horiz[r * out_w + x] = taps.iter().map(|&(i, wt)| wt * f64::from(band[r * w + i])).sum();
            }
        }
        for taps in &row_taps {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * horiz[i * out_w + x]).sum();
                values.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    HsiCube::new(out_h, out_w, cube.bands, values, cube.name.clone())
}

/// Bicubic downsampling by an integer factor (extents floored).
pub fn degrade(cube: &HsiCube, scale: usize) -> Result<HsiCube> {
    if scale == 0 || cube.height < scale || cube.width < scale {
        return Err(Error::Config(format!("cannot downsample {}×{} by {scale}", cube.height, cube.width)));
    }
    bicubic_resize(cube, cube.height / scale, cube.width / scale)
}

/// Co-registered low/high-resolution crops.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr: HsiCube,
    pub hr: HsiCube,
    /// Top-left corner of `hr` in the source cube.
    pub hr_offset: (usize, usize),
}

/// Downsamples the whole cube once, tiles the LR grid row-major with
/// `stride`, and cuts the HR patches at `scale×` the LR offsets.
pub fn extract_patches(hr: &HsiCube, lr_size: usize, scale: usize, stride: usize) -> Result<Vec<PatchPair>> {
    if lr_size == 0 || stride == 0 || scale == 0 {
        return Err(Error::Config("patch size, stride and scale must be positive".into()));
    }
    if hr.height < lr_size * scale || hr.width < lr_size * scale {
        return Err(Error::dim(
            "spatial",
            format!("{}×{} cube smaller than one {s}×{s} HR patch", hr.height, hr.width, s = lr_size * scale),
        ));
    }
    let lr = degrade(hr, scale)?;
    let mut out = Vec::new();
    for r in (0..=lr.height - lr_size).step_by(stride) {
        for c in (0..=lr.width - lr_size).step_by(stride) {
            out.push(PatchPair {
                lr: lr.crop(r, c, lr_size, lr_size)?,
                hr: hr.crop(r * scale, c * scale, lr_size * scale, lr_size * scale)?,
                hr_offset: (r * scale, c * scale),
            });
        }
    }
    Ok(out)
}

/// Seeded shuffle, then `⌈n·fraction⌉` items go to validation.
pub fn split_train_val<T>(items: Vec<T>, val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let n = items.len();
    let n_val = ((n as f64 * val_fraction) - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut val = Vec::with_capacity(n_val);
    let mut train = Vec::with_capacity(n - n_val);
    for (rank, &i) in order.iter().enumerate() {
        let item = slots[i].take().expect("each index visited once");
        if rank < n_val {
            val.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, val))
}

/// Every `.hsi` cube directly inside `dir`, in file-name order.
pub fn load_cube_dir(dir: impl AsRef<Path>) -> Result<Vec<HsiCube>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "hsi") {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(Error::Config(format!("no .hsi cubes in {}", dir.display())));
    }
    paths.sort();
    paths.iter().map(load_cube).collect()
}

/// Splits whole scenes into training and validation sets, then patches
/// each side, so no held-out pixel is ever seen in training.
pub fn scene_patches(
    scenes: Vec<HsiCube>,
    lr_size: usize,
    scale: usize,
    stride: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatchPair>, Vec<PatchPair>)> {
    let (train, val) = split_train_val(scenes, val_fraction, seed)?;
    let patch = |cubes: &[HsiCube]| -> Result<Vec<PatchPair>> {
        let mut out = Vec::new();
        for c in cubes {
            out.extend(extract_patches(c, lr_size, scale, stride)?);
        }
        Ok(out)
    };
    Ok((patch(&train)?, patch(&val)?))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Deterministic synthetic scene from a linear mixing model.
///
/// Endmember spectra are smoothed random walks over the bands; abundances
/// are per-pixel softmaxes of sums of Gaussian bumps; a few half-plane steps
/// with spectral profiles add sharp edges.
pub fn synth_scene(seed: u64, h: usize, w: usize, bands: usize, n_endmembers: usize) -> Result<HsiCube> {
    if n_endmembers < 2 {
        return Err(Error::Config(format!("need at least 2 endmembers, got {n_endmembers}")));
    }
    if h == 0 || w == 0 || bands == 0 {
        return Err(Error::Config("scene extents must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Spectral signatures: random level plus a slow random walk across bands.
    let step = 0.6 / (bands as f64).sqrt();
    let mut spectra: Vec<Vec<f64>> = (0..n_endmembers)
        .map(|_| {
            let mut level = rng.gen_range(0.0..1.0);
            (0..bands)
                .map(|_| {
                    level += step * normal(&mut rng);
                    level
                })
                .collect()
        })
        .collect();
    let lo = spectra.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = spectra.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for s in &mut spectra {
        for v in s.iter_mut() {
            *v = 0.05 + 0.85 * (*v - lo) / span;
        }
    }

    // Abundance logits from Gaussian bumps.
    let diag = (h.max(w)) as f64;
    let mut logits = vec![0.0f64; n_endmembers * h * w];
    for e in 0..n_endmembers {
        for _ in 0..4 {
            let cy = rng.gen_range(0.0..h as f64);
            let cx = rng.gen_range(0.0..w as f64);
            let sigma = rng.gen_range(diag / 10.0..diag / 3.0);
            let amp = rng.gen_range(0.5..2.5);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    logits[(e * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let sharpness = 3.0;
    let mut abundance = vec![0.0f64; n_endmembers * h * w];
    for p in 0..h * w {
        let max = (0..n_endmembers).map(|e| logits[e * h * w + p]).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..n_endmembers)
            .map(|e| (sharpness * (logits[e * h * w + p] - max)).exp())
            .collect();
        let total: f64 = exps.iter().sum();
        for e in 0..n_endmembers {
            abundance[e * h * w + p] = exps[e] / total;
        }
    }

    // Half-plane steps, each carrying one endmember's spectral shape.
    let mut edges = vec![0.0f64; bands * h * w];
    for _ in 0..3 {
        let angle = rng.gen_range(0.0..PI);
        let (ny, nx) = (angle.sin(), angle.cos());
        let oy = rng.gen_range(0.25..0.75) * h as f64;
        let ox = rng.gen_range(0.25..0.75) * w as f64;
        let amp = rng.gen_range(0.03..0.08) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let profile = &spectra[rng.gen_range(0..n_endmembers)];
        for y in 0..h {
            for x in 0..w {
                if (y as f64 - oy) * ny + (x as f64 - ox) * nx > 0.0 {
                    for (b, &s) in profile.iter().enumerate() {
                        edges[(b * h + y) * w + x] += amp * s;
                    }
                }
            }
        }
    }

    let mut values = Vec::with_capacity(bands * h * w);
    for b in 0..bands {
        for p in 0..h * w {
            let mixed: f64 = (0..n_endmembers).map(|e| abundance[e * h * w + p] * spectra[e][b]).sum();
            values.push((mixed + edges[b * h * w + p]).clamp(0.0, 1.0) as f32);
        }
    }
    HsiCube::new(h, w, bands, values, format!("synth-{seed}"))
}
