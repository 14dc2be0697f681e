//! Deterministic multi-scale feature pyramid.
//!
//! Each level carries eight standardized channels computed from the
//! grayscale image: raw intensity, Gaussian blur, Sobel x/y of the blurred
//! image, and four census-like contrast channels
//! `tanh((b(x + o) − b(x)) / τ)` at offsets of two pixels. Level `ℓ + 1`
//! is the 2×2 average of the blurred level-`ℓ` intensity.
//!
//! Pixel centers sit at integer coordinates. A level-0 coordinate `x₀` maps
//! to `x_ℓ = (x₀ − (2^ℓ − 1)/2) / 2^ℓ` on level `ℓ`.

use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::{skew, PoseSE3};
use crate::image::Image;

pub const FEATURE_CHANNELS: usize = 8;
pub const MIN_IMAGE_SIZE: usize = 32;
const STD_EPS: f64 = 1e-12;
const CENSUS_OFFSETS: [(isize, isize); 4] = [(2, 0), (0, 2), (-2, 0), (0, -2)];
/// Cells per side of the pooled global descriptor.
const DESCRIPTOR_GRID: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderMode {
    /// Periodic extension; makes every filter commute with circular shifts.
    Wrap,
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub levels: usize,
    pub blur_sigma: f64,
    pub census_tau: f64,
    pub border: BorderMode,
    pub context_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            blur_sigma: 1.0,
            census_tau: 0.05,
            border: BorderMode::Wrap,
            context_seed: 0,
        }
    }
}

/// One feature volume: `height × width` pixels with `channels` values each,
/// stored pixel-interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureLevel {
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// One channel as an `H × W` matrix.
    pub fn channel_matrix(&self, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.height, self.width, |y, x| self.pixel(x, y)[c])
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }

    /// Top-left corner of the bilinear cell containing `(x, y)`.
    #[inline]
    pub fn cell(&self, x: f64, y: f64) -> (usize, usize) {
        let cx = (x.floor().max(0.0) as usize).min(self.width - 2);
        let cy = (y.floor().max(0.0) as usize).min(self.height - 2);
        (cx, cy)
    }

    /// Bilinear interpolation; exact at integer coordinates.
    pub fn sample(&self, x: f64, y: f64, level: usize) -> Result<Vec<f64>> {
        if !self.in_bounds(x, y) {
            return Err(Error::OutOfBounds { x, y, level });
        }
        let mut out = vec![0.0; self.channels];
        let (cx, cy) = self.cell(x, y);
        self.sample_in_cell(x, y, cx, cy, &mut out, None);
        Ok(out)
    }

    /// Bilinear interpolation using the cell at `(cx, cy)`, extrapolating
    /// linearly when `(x, y)` lies outside it. When `grad` is given it
    /// receives `∂/∂x` then `∂/∂y` per channel.
    #[inline]
    pub fn sample_in_cell(
        &self,
        x: f64,
        y: f64,
        cx: usize,
        cy: usize,
        out: &mut [f64],
        grad: Option<(&mut [f64], &mut [f64])>,
    ) {
        let (fx, fy) = (x - cx as f64, y - cy as f64);
        let p00 = self.pixel(cx, cy);
        let p10 = self.pixel(cx + 1, cy);
        let p01 = self.pixel(cx, cy + 1);
        let p11 = self.pixel(cx + 1, cy + 1);
        let (w00, w10, w01, w11) = (
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        );
        for c in 0..self.channels {
            out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
        }
        if let Some((gx, gy)) = grad {
            for c in 0..self.channels {
                gx[c] = (1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]);
                gy[c] = (1.0 - fx) * (p01[c] - p00[c]) + fx * (p11[c] - p10[c]);
            }
        }
    }
}

/// Feature volumes per level plus the contextual volume.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
    pub contextual: FeatureLevel,
}

impl FeaturePyramid {
    pub fn level(&self, l: usize) -> &FeatureLevel {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn sample(&self, level: usize, x: f64, y: f64) -> Result<Vec<f64>> {
        self.levels[level].sample(x, y, level)
    }

    /// Pooled level-0 channel means over a fixed grid.
    pub fn global_descriptor(&self) -> Vec<f64> {
        let l = &self.levels[0];
        let g = DESCRIPTOR_GRID;
        let mut desc = vec![0.0; g * g * l.channels];
        let mut counts = vec![0usize; g * g];
        for y in 0..l.height {
            let gy = y * g / l.height;
            for x in 0..l.width {
                let cell = gy * g + x * g / l.width;
                counts[cell] += 1;
                for (c, v) in l.pixel(x, y).iter().enumerate() {
                    desc[cell * l.channels + c] += v;
                }
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            for c in 0..l.channels {
                desc[cell * l.channels + c] /= (*n).max(1) as f64;
            }
        }
        desc
    }

    /// Mean absolute value of each contextual channel.
    pub fn context_summary(&self) -> Vec<f64> {
        let c = &self.contextual;
        let n = (c.width * c.height) as f64;
        let mut out = vec![0.0; c.channels];
        for px in c.data.chunks(c.channels) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v.abs();
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Writes each level-0 channel as an 8-bit grayscale PNG, mapping
    /// `[-3, 3]` standard deviations to `[0, 255]`.
    pub fn dump_channels(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let l = &self.levels[0];
        for c in 0..l.channels {
            let img = Image::from_fn(l.width, l.height, 1, |x, y| {
                vec![(l.pixel(x, y)[c] + 3.0) / 6.0]
            });
            img.save_png(&dir.join(format!("channel_{c}.png")))?;
        }
        Ok(())
    }
}

/// Level-0 coordinate mapped onto level `level`.
#[inline]
pub fn level_coordinate(x0: f64, level: usize) -> f64 {
    let s = (1usize << level) as f64;
    (x0 - (s - 1.0) / 2.0) / s
}

#[inline]
fn border_index(i: isize, n: usize, mode: BorderMode) -> usize {
    match mode {
        BorderMode::Wrap => i.rem_euclid(n as isize) as usize,
        BorderMode::Clamp => i.clamp(0, n as isize - 1) as usize,
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable correlation with `kx` along rows and `ky` along columns.
fn separable(
    src: &[f64],
    w: usize,
    h: usize,
    kx: &[f64],
    ky: &[f64],
    mode: BorderMode,
) -> Vec<f64> {
    let (rx, ry) = ((kx.len() / 2) as isize, (ky.len() / 2) as isize);
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in kx.iter().enumerate() {
                s += k * src[y * w + border_index(x as isize + j as isize - rx, w, mode)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, k) in ky.iter().enumerate() {
                s += k * tmp[border_index(y as isize + j as isize - ry, h, mode) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn standardize(ch: &mut [f64]) {
    let n = ch.len() as f64;
    let mean = ch.iter().sum::<f64>() / n;
    let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPS {
        ch.iter_mut().for_each(|v| *v = 0.0);
    } else {
        ch.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
}

/// Channels of one level, plus the blurred intensity for the next level.
fn level_features(
    gray: &[f64],
    w: usize,
    h: usize,
    cfg: &FeatureConfig,
) -> (FeatureLevel, Vec<f64>) {
    let g = gaussian_kernel(cfg.blur_sigma);
    let blur = separable(gray, w, h, &g, &g, cfg.border);
    let sx = separable(
        &blur,
        w,
        h,
        &[-0.5, 0.0, 0.5],
        &[0.25, 0.5, 0.25],
        cfg.border,
    );
    let sy = separable(
        &blur,
        w,
        h,
        &[0.25, 0.5, 0.25],
        &[-0.5, 0.0, 0.5],
        cfg.border,
    );
    let mut chans: Vec<Vec<f64>> = vec![gray.to_vec(), blur.clone(), sx, sy];
    for (ox, oy) in CENSUS_OFFSETS {
        let mut c = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let xx = border_index(x as isize + ox, w, cfg.border);
                let yy = border_index(y as isize + oy, h, cfg.border);
                c[y * w + x] = ((blur[yy * w + xx] - blur[y * w + x]) / cfg.census_tau).tanh();
            }
        }
        chans.push(c);
    }
    chans.iter_mut().for_each(|c| standardize(c));
    let mut data = vec![0.0; w * h * FEATURE_CHANNELS];
    for (c, ch) in chans.iter().enumerate() {
        for (i, v) in ch.iter().enumerate() {
            data[i * FEATURE_CHANNELS + c] = *v;
        }
    }
    (
        FeatureLevel {
            width: w,
            height: h,
            channels: FEATURE_CHANNELS,
            data,
        },
        blur,
    )
}

fn downsample(src: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w2 * h2];
    for y in 0..h2 {
        for x in 0..w2 {
            let i = 2 * y * w + 2 * x;
            out[y * w2 + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
        }
    }
    (out, w2, h2)
}

/// Fixed orthogonal `d × d` matrix from a seed (QR of a Gaussian matrix).
fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = m.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

pub fn extract_features(image: &Image, cfg: &FeatureConfig) -> Result<FeaturePyramid> {
    if image.width < MIN_IMAGE_SIZE || image.height < MIN_IMAGE_SIZE {
        return Err(Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            min: MIN_IMAGE_SIZE,
        });
    }
    if cfg.levels == 0 {
        return Err(Error::Config("feature.levels must be at least 1".into()));
    }
    let (mut gray, mut w, mut h) = (image.to_gray(), image.width, image.height);
    let mut levels = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let (level, blur) = level_features(&gray, w, h, cfg);
        levels.push(level);
        if l + 1 < cfg.levels {
            (gray, w, h) = downsample(&blur, w, h);
        }
    }
    let coarse = levels.last().expect("at least one level");
    let q = random_orthogonal(FEATURE_CHANNELS, cfg.context_seed);
    let mut ctx = coarse.clone();
    for (src, dst) in coarse
        .data
        .chunks(FEATURE_CHANNELS)
        .zip(ctx.data.chunks_mut(FEATURE_CHANNELS))
    {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (0..FEATURE_CHANNELS).map(|j| q[(i, j)] * src[j]).sum();
        }
    }
    Ok(FeaturePyramid {
        levels,
        contextual: ctx,
    })
}

/// Extracts pyramids for many images in parallel; output order matches input.
pub fn extract_all(images: &[Image], cfg: &FeatureConfig) -> Result<Vec<FeaturePyramid>> {
    images
        .par_iter()
        .map(|im| extract_features(im, cfg))
        .collect()
}

/// The `k` images whose descriptors are closest to `target` by cosine
/// distance, ties broken by ascending id.
pub fn neighbor_select(descriptors: &[Vec<f64>], target: usize, k: usize) -> Result<Vec<usize>> {
    let available = descriptors.len().saturating_sub(1);
    if k > available {
        return Err(Error::NotEnoughViews {
            requested: k,
            available,
        });
    }
    let cos_dist = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            1.0
        } else {
            1.0 - dot / (na * nb)
        }
    };
    let t = &descriptors[target];
    let mut ranked: Vec<(f64, usize)> = descriptors
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(i, d)| (cos_dist(t, d), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Mean square-root Sampson distance of pixel matches `(x_a, x_b)` under the
/// essential matrix of `relative`, the transform from camera-a to camera-b
/// coordinates.
pub fn epipolar_residual(
    relative: &PoseSE3,
    matches: &[(Vector2<f64>, Vector2<f64>)],
    cam_a: &Camera,
    cam_b: &Camera,
) -> Result<f64> {
    if matches.len() < 8 {
        return Err(Error::DegenerateConfiguration(format!(
            "epipolar check needs at least 8 matches, got {}",
            matches.len()
        )));
    }
    let e: Matrix3<f64> = skew(&relative.t) * relative.rotation();
    let bearing = |cam: &Camera, x: &Vector2<f64>| -> Result<Vector3<f64>> {
        let d = cam.direction_camera(x.x, x.y);
        if d.z <= 1e-9 {
            return Err(Error::DegenerateConfiguration(
                "match bearing at or beyond 90°".into(),
            ));
        }
        Ok(d / d.z)
    };
    let mut sum = 0.0;
    for (a, b) in matches {
        let (xa, xb) = (bearing(cam_a, a)?, bearing(cam_b, b)?);
        let ea = e * xa;
        let eb = e.transpose() * xb;
        let num = xb.dot(&ea);
        let den = ea.x * ea.x + ea.y * ea.y + eb.x * eb.x + eb.y * eb.y;
        if den > 0.0 {
            sum += num.abs() / den.sqrt();
        }
    }
    Ok(sum / matches.len() as f64)
}
