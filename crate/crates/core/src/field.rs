//! Density and color voxel grid with volume rendering, fitting against posed
//! images and iso-surface extraction.
//!
//! Values live at voxel centers and are trilinearly interpolated; lattice
//! points outside the grid read as zero density and do not contribute color.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::image::{DepthMap, Image};
use crate::losses::mse;

const CHECKPOINT_MAGIC: &[u8; 4] = b"VXF1";
const OPACITY_EPS: f64 = 1e-10;
/// Rays per gradient accumulation buffer; fixed so the reduction order does
/// not depend on the thread count.
const RAY_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField {
    pub resolution: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
    /// Row-major over `(x, y, z)`: index `(ix·ny + iy)·nz + iz`.
    pub density: Vec<f64>,
    /// RGB per voxel, same ordering as `density`.
    pub color: Vec<[f64; 3]>,
}

impl VoxelField {
    pub fn new(
        resolution: [usize; 3],
        min: [f64; 3],
        max: [f64; 3],
        density: f64,
        color: [f64; 3],
    ) -> Result<Self> {
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::InvalidSpec(format!(
                "field resolution {resolution:?} has a zero axis"
            )));
        }
        if (0..3).any(|a| !(max[a] > min[a]) || !min[a].is_finite() || !max[a].is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "degenerate field bounds {min:?} .. {max:?}"
            )));
        }
        if !(density >= 0.0) || color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidSpec(
                "density must be ≥ 0 and colors in [0, 1]".into(),
            ));
        }
        let n = resolution.iter().product();
        Ok(Self {
            resolution,
            min,
            max,
            density: vec![density; n],
            color: vec![color; n],
        })
    }

    /// Samples `density` and `color` functions at every voxel center.
    pub fn from_fn(
        resolution: [usize; 3],
        min: [f64; 3],
        max: [f64; 3],
        f: impl Fn(&Vector3<f64>) -> (f64, [f64; 3]),
    ) -> Result<Self> {
        let mut field = Self::new(resolution, min, max, 0.0, [0.0; 3])?;
        for ix in 0..resolution[0] {
            for iy in 0..resolution[1] {
                for iz in 0..resolution[2] {
                    let i = field.index(ix, iy, iz);
                    let (s, c) = f(&field.center(ix, iy, iz));
                    field.density[i] = s.max(0.0);
                    field.color[i] = c.map(|v| v.clamp(0.0, 1.0));
                }
            }
        }
        Ok(field)
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution[1] + iy) * self.resolution[2] + iz
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.max[a] - self.min[a]) / self.resolution[a] as f64)
    }

    pub fn center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let s = self.voxel_size();
        Vector3::new(
            self.min[0] + (ix as f64 + 0.5) * s[0],
            self.min[1] + (iy as f64 + 0.5) * s[1],
            self.min[2] + (iz as f64 + 0.5) * s[2],
        )
    }

    pub fn max_density(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }

    /// The eight lattice corners around `p` with their trilinear weights.
    /// Corners outside the grid are `None`.
    fn corners(&self, p: &Vector3<f64>) -> [(Option<usize>, f64); 8] {
        let s = self.voxel_size();
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = (p[a] - self.min[a]) / s[a] - 0.5;
            let f = g.floor();
            base[a] = f as i64;
            frac[a] = g - f;
        }
        let mut out = [(None, 0.0); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                let bit = (c >> a) & 1;
                idx[a] = base[a] + bit as i64;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            let inside = (0..3).all(|a| idx[a] >= 0 && (idx[a] as usize) < self.resolution[a]);
            *slot = (
                inside.then(|| self.index(idx[0] as usize, idx[1] as usize, idx[2] as usize)),
                w,
            );
        }
        out
    }

    /// Trilinear density and color at `p`. Density reads zero outside the
    /// grid; color is renormalized over the corners inside it.
    pub fn sample(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        let cs = self.corners(p);
        let cw = color_weights(&cs);
        let mut s = 0.0;
        let mut c = [0.0; 3];
        for (&(i, w), wc) in cs.iter().zip(cw) {
            if let Some(i) = i {
                s += w * self.density[i];
                for k in 0..3 {
                    c[k] += wc * self.color[i][k];
                }
            }
        }
        (s, c)
    }

    /// Ray parameters where the ray is inside the field bounds.
    pub fn clip_ray(&self, ray: &Ray) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for a in 0..3 {
            let (o, d) = (ray.origin[a], ray.direction[a]);
            if d.abs() < 1e-300 {
                if o < self.min[a] || o > self.max[a] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[a] - o) / d, (self.max[a] - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        (t1 > t0.max(0.0)).then_some((t0.max(0.0), t1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 12 + 48 + self.len() * 32);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for n in self.resolution {
            buf.extend_from_slice(&(n as u32).to_le_bytes());
        }
        for v in self.min.iter().chain(&self.max) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.density {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.color {
            for v in c {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::InvalidSpec(format!("{}: {reason}", path.display()));
        if bytes.len() < 64 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("not a field checkpoint"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let resolution = [u32_at(4), u32_at(8), u32_at(12)];
        let min = [f64_at(16), f64_at(24), f64_at(32)];
        let max = [f64_at(40), f64_at(48), f64_at(56)];
        let n: usize = resolution.iter().product();
        if bytes.len() != 64 + n * 32 {
            return Err(corrupt("size does not match the header"));
        }
        let mut field = Self::new(resolution, min, max, 0.0, [0.0; 3])?;
        for i in 0..n {
            field.density[i] = f64_at(64 + i * 8);
            let o = 64 + n * 8 + i * 24;
            field.color[i] = [f64_at(o), f64_at(o + 8), f64_at(o + 16)];
        }
        if field.density.iter().any(|s| !(*s >= 0.0))
            || field
                .color
                .iter()
                .flatten()
                .any(|c| !(0.0..=1.0).contains(c))
        {
            return Err(corrupt("density or color out of range"));
        }
        Ok(field)
    }
}

/// Corner weights for color: trilinear weights renormalized over the
/// corners inside the grid.
fn color_weights(cs: &[(Option<usize>, f64); 8]) -> [f64; 8] {
    let total: f64 = cs.iter().filter(|(i, _)| i.is_some()).map(|(_, w)| w).sum();
    std::array::from_fn(|k| {
        if cs[k].0.is_some() && total > 0.0 {
            cs[k].1 / total
        } else {
            0.0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub expected_depth: f64,
}

/// One quadrature interval: density and color held constant over `delta`,
/// evaluated at ray parameter `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub t: f64,
    pub delta: f64,
    pub sigma: f64,
    pub rgb: [f64; 3],
}

/// Alpha compositing over consecutive intervals.
pub fn composite(intervals: &[Interval], background: [f64; 3]) -> RayRender {
    let mut trans = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for iv in intervals {
        let alpha = 1.0 - (-iv.sigma * iv.delta).exp();
        let w = trans * alpha;
        for k in 0..3 {
            rgb[k] += w * iv.rgb[k];
        }
        depth += w * iv.t;
        trans *= 1.0 - alpha;
    }
    let opacity = 1.0 - trans;
    for k in 0..3 {
        rgb[k] += trans * background[k];
    }
    RayRender {
        rgb,
        opacity,
        expected_depth: depth / opacity.max(OPACITY_EPS),
    }
}

/// Sample positions of `n` equal strata on `[t_near, t_far]`, at the stratum
/// midpoints or jittered uniformly inside each stratum.
fn strata(n: usize, t_near: f64, t_far: f64, rng: Option<&mut ChaCha8Rng>) -> Vec<(f64, f64)> {
    let delta = (t_far - t_near) / n as f64;
    match rng {
        None => (0..n)
            .map(|k| (t_near + (k as f64 + 0.5) * delta, delta))
            .collect(),
        Some(rng) => (0..n)
            .map(|k| (t_near + (k as f64 + rng.random::<f64>()) * delta, delta))
            .collect(),
    }
}

/// Renders one ray with `n_samples` strata between `t_near` and `t_far`.
/// Without an RNG the strata are sampled at their midpoints.
pub fn render_ray(
    field: &VoxelField,
    ray: &Ray,
    n_samples: usize,
    t_near: f64,
    t_far: f64,
    background: [f64; 3],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<RayRender> {
    if n_samples < 2 || !(t_near < t_far) {
        return Err(Error::InvalidSpec(format!(
            "render_ray needs n_samples ≥ 2 and t_near < t_far, got {n_samples}, {t_near}, {t_far}"
        )));
    }
    let intervals: Vec<Interval> = strata(n_samples, t_near, t_far, rng)
        .into_iter()
        .map(|(t, delta)| {
            let (sigma, rgb) = field.sample(&ray.at(t));
            Interval {
                t,
                delta,
                sigma,
                rgb,
            }
        })
        .collect();
    Ok(composite(&intervals, background))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderOptions {
    /// Samples per ray inside the field bounds.
    pub n_samples: usize,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_samples: 96,
            background: [0.0; 3],
        }
    }
}

/// Renders one pixel ray clipped to the field bounds, returning the
/// composited color and the expected hit point when anything was hit.
fn render_pixel(
    field: &VoxelField,
    ray: &Ray,
    opts: &RenderOptions,
) -> (RayRender, Option<Vector3<f64>>) {
    match field.clip_ray(ray) {
        Some((t0, t1)) => {
            let r = render_ray(
                field,
                ray,
                opts.n_samples.max(2),
                t0,
                t1,
                opts.background,
                None,
            )
            .expect("clipped interval is non-empty");
            let hit = (r.opacity > 1e-6).then(|| ray.at(r.expected_depth));
            (r, hit)
        }
        None => (
            RayRender {
                rgb: opts.background,
                opacity: 0.0,
                expected_depth: 0.0,
            },
            None,
        ),
    }
}

/// Renders every pixel of `cam`. The depth map follows the camera's depth
/// convention and is NaN where the rendered opacity is negligible.
pub fn render_image(field: &VoxelField, cam: &Camera, opts: &RenderOptions) -> (Image, DepthMap) {
    let (w, h) = (cam.width(), cam.height());
    let inv = cam.pose().inverse();
    let pixels: Vec<(RayRender, f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let ray = cam.pixel_to_ray((i % w) as f64, (i / w) as f64);
            let (r, hit) = render_pixel(field, &ray, opts);
            let d = hit.map_or(f64::NAN, |p| cam.depth_of(&inv.transform_point(&p)));
            (r, d)
        })
        .collect();
    let mut image = Image::new(w, h, 3);
    let mut depth = DepthMap::filled(w, h, f64::NAN);
    for (i, (r, d)) in pixels.into_iter().enumerate() {
        image.data[i * 3..i * 3 + 3].copy_from_slice(&r.rgb);
        depth.values[i] = d;
    }
    (image, depth)
}

/// A training ray with its target color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingRay {
    pub ray: Ray,
    pub target: [f64; 3],
}

pub fn training_rays(images: &[Image], cameras: &[Camera]) -> Result<Vec<TrainingRay>> {
    if images.len() != cameras.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} images but {} cameras",
            images.len(),
            cameras.len()
        )));
    }
    let mut rays = Vec::new();
    for (im, cam) in images.iter().zip(cameras) {
        if (im.width, im.height) != (cam.width(), cam.height()) || im.channels != 3 {
            return Err(Error::DimensionMismatch(format!(
                "image {}x{}x{} does not match camera {}x{}",
                im.width,
                im.height,
                im.channels,
                cam.width(),
                cam.height()
            )));
        }
        for y in 0..im.height {
            for x in 0..im.width {
                let p = im.pixel(x, y);
                rays.push(TrainingRay {
                    ray: cam.pixel_to_ray(x as f64, y as f64),
                    target: [p[0], p[1], p[2]],
                });
            }
        }
    }
    Ok(rays)
}

/// Squared-error loss over `rays` and its gradient with respect to every
/// voxel density and color, `(loss, d_density, d_color)`. The loss is the
/// mean over rays and channels. Strata are jittered when `seed` is given,
/// with one stream per ray chunk.
pub fn rgb_loss_gradient(
    field: &VoxelField,
    rays: &[TrainingRay],
    opts: &RenderOptions,
    seed: Option<u64>,
) -> (f64, Vec<f64>, Vec<[f64; 3]>) {
    let n = field.len();
    let scale = 1.0 / (3 * rays.len().max(1)) as f64;
    let partials: Vec<(f64, Vec<f64>, Vec<[f64; 3]>)> = rays
        .par_chunks(RAY_CHUNK)
        .enumerate()
        .map(|(chunk, rays)| {
            let mut rng = seed.map(|s| {
                ChaCha8Rng::seed_from_u64(s ^ (chunk as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
            });
            let mut loss = 0.0;
            let mut gs = vec![0.0; n];
            let mut gc = vec![[0.0; 3]; n];
            for tr in rays {
                loss += ray_backward(field, tr, opts, rng.as_mut(), scale, &mut gs, &mut gc);
            }
            (loss, gs, gc)
        })
        .collect();
    let mut loss = 0.0;
    let mut gs = vec![0.0; n];
    let mut gc = vec![[0.0; 3]; n];
    for (l, s, c) in partials {
        loss += l;
        gs.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        for (a, b) in gc.iter_mut().zip(&c) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
    }
    (loss, gs, gc)
}

/// Adds `scale`-weighted gradients of one ray's squared error to the
/// accumulators and returns its scaled loss.
fn ray_backward(
    field: &VoxelField,
    tr: &TrainingRay,
    opts: &RenderOptions,
    rng: Option<&mut ChaCha8Rng>,
    scale: f64,
    gs: &mut [f64],
    gc: &mut [[f64; 3]],
) -> f64 {
    let bg = opts.background;
    let Some((t0, t1)) = field.clip_ray(&tr.ray) else {
        return scale * (0..3).map(|k| (bg[k] - tr.target[k]).powi(2)).sum::<f64>();
    };
    let samples = strata(opts.n_samples.max(2), t0, t1, rng);
    let corners: Vec<[(Option<usize>, f64); 8]> = samples
        .iter()
        .map(|(t, _)| field.corners(&tr.ray.at(*t)))
        .collect();
    let intervals: Vec<Interval> = samples
        .iter()
        .zip(&corners)
        .map(|(&(t, delta), cs)| {
            let mut sigma = 0.0;
            let mut rgb = [0.0; 3];
            for (&(i, w), wc) in cs.iter().zip(color_weights(cs)) {
                if let Some(i) = i {
                    sigma += w * field.density[i];
                    for k in 0..3 {
                        rgb[k] += wc * field.color[i][k];
                    }
                }
            }
            Interval {
                t,
                delta,
                sigma,
                rgb,
            }
        })
        .collect();
    let out = composite(&intervals, bg);
    let resid: [f64; 3] = [0, 1, 2].map(|k| out.rgb[k] - tr.target[k]);
    let loss = scale * resid.iter().map(|r| r * r).sum::<f64>();
    let dl: [f64; 3] = resid.map(|r| 2.0 * scale * r);

    // Forward transmittances, then a backward sweep carrying the color
    // composited behind each interval (background included).
    let m = intervals.len();
    let mut trans = Vec::with_capacity(m + 1);
    trans.push(1.0);
    for iv in &intervals {
        let t = *trans.last().unwrap();
        trans.push(t * (-iv.sigma * iv.delta).exp());
    }
    let mut behind = [0, 1, 2].map(|k| trans[m] * bg[k]);
    for j in (0..m).rev() {
        let iv = &intervals[j];
        let w = trans[j] - trans[j + 1];
        let d_sigma: f64 = (0..3)
            .map(|k| dl[k] * iv.delta * (trans[j + 1] * iv.rgb[k] - behind[k]))
            .sum();
        for (&(i, cw), wc) in corners[j].iter().zip(color_weights(&corners[j])) {
            if let Some(i) = i {
                gs[i] += cw * d_sigma;
                for k in 0..3 {
                    gc[i][k] += wc * w * dl[k];
                }
            }
        }
        for k in 0..3 {
            behind[k] += w * iv.rgb[k];
        }
    }
    loss
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub resolution: [usize; 3],
    /// Field bounds; when absent the synthetic scene bounds are used.
    pub bounds: Option<[[f64; 3]; 2]>,
    pub iterations: usize,
    pub lr_density: f64,
    pub lr_color: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rays per iteration; 0 uses every training ray.
    pub batch_rays: usize,
    pub init_density: f64,
    /// Weight of the squared-difference total variation of density.
    pub tv_density: f64,
    /// Weight of the squared-difference total variation of color.
    pub tv_color: f64,
    /// Iterations between full-data evaluations for best-iterate tracking.
    pub eval_every: usize,
    /// Consecutive evaluations with rising loss tolerated.
    pub patience: usize,
    pub seed: u64,
    pub render: RenderOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            resolution: [64; 3],
            bounds: None,
            iterations: 400,
            lr_density: 1.0,
            lr_color: 0.05,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            batch_rays: 8192,
            init_density: 0.1,
            tv_density: 0.0,
            tv_color: 0.0,
            eval_every: 25,
            patience: 8,
            seed: 0,
            render: RenderOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub iteration: usize,
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub field: VoxelField,
    /// Full-data evaluations, in order.
    pub history: Vec<FitRecord>,
    pub best_iteration: usize,
}

/// Mean over neighboring voxel pairs of `w_σ (σ_a − σ_b)² + w_c ‖c_a − c_b‖²`,
/// with its gradient added to `gs` and `gc`.
pub fn total_variation(
    field: &VoxelField,
    w_sigma: f64,
    w_color: f64,
    gs: &mut [f64],
    gc: &mut [[f64; 3]],
) -> f64 {
    if w_sigma == 0.0 && w_color == 0.0 {
        return 0.0;
    }
    let [nx, ny, nz] = field.resolution;
    let pairs = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1);
    if pairs == 0 {
        return 0.0;
    }
    let inv = 1.0 / pairs as f64;
    let mut value = 0.0;
    for ix in 0..nx {
        for iy in 0..ny {
            for iz in 0..nz {
                let a = field.index(ix, iy, iz);
                let next = [
                    (ix + 1 < nx).then(|| field.index(ix + 1, iy, iz)),
                    (iy + 1 < ny).then(|| field.index(ix, iy + 1, iz)),
                    (iz + 1 < nz).then(|| field.index(ix, iy, iz + 1)),
                ];
                for b in next.into_iter().flatten() {
                    let ds = field.density[a] - field.density[b];
                    value += w_sigma * ds * ds * inv;
                    gs[a] += 2.0 * w_sigma * ds * inv;
                    gs[b] -= 2.0 * w_sigma * ds * inv;
                    for k in 0..3 {
                        let dc = field.color[a][k] - field.color[b][k];
                        value += w_color * dc * dc * inv;
                        gc[a][k] += 2.0 * w_color * dc * inv;
                        gc[b][k] -= 2.0 * w_color * dc * inv;
                    }
                }
            }
        }
    }
    value
}

/// Mean squared error of midpoint renders over all training rays.
pub fn training_loss(field: &VoxelField, rays: &[TrainingRay], opts: &RenderOptions) -> f64 {
    let sum: f64 = rays
        .par_chunks(RAY_CHUNK)
        .map(|chunk| {
            chunk
                .iter()
                .map(|tr| {
                    let (r, _) = render_pixel(field, &tr.ray, opts);
                    (0..3)
                        .map(|k| (r.rgb[k] - tr.target[k]).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    sum / (3 * rays.len().max(1)) as f64
}

fn mse_psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Fits density and color to posed images by Adam on the squared color
/// error, projecting back onto `σ ≥ 0` and colors in `[0, 1]` after every
/// step. Returns the best field among the periodic full-data evaluations.
pub fn fit_field(
    field: VoxelField,
    images: &[Image],
    cameras: &[Camera],
    cfg: &FitConfig,
) -> Result<FitResult> {
    if images.len() < 2 {
        return Err(Error::NotEnoughViews {
            requested: 2,
            available: images.len(),
        });
    }
    fit_rays(field, &training_rays(images, cameras)?, cfg)
}

/// [`fit_field`] on an explicit ray set.
pub fn fit_rays(mut field: VoxelField, rays: &[TrainingRay], cfg: &FitConfig) -> Result<FitResult> {
    if rays.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let n = field.len();
    let (mut ms, mut vs) = (vec![0.0; n], vec![0.0; n]);
    let (mut mc, mut vc) = (vec![[0.0; 3]; n], vec![[0.0; 3]; n]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_every = cfg.eval_every.max(1);
    let first = training_loss(&field, rays, &cfg.render);
    let mut history = vec![FitRecord {
        iteration: 0,
        loss: first,
        psnr: mse_psnr(first),
    }];
    let mut best = (first, 0, field.clone());
    let mut rising = 0;
    let mut batch = Vec::new();
    for it in 1..=cfg.iterations {
        let subset: &[TrainingRay] = if cfg.batch_rays == 0 || cfg.batch_rays >= rays.len() {
            rays
        } else {
            batch.clear();
            batch.extend((0..cfg.batch_rays).map(|_| rays[rng.random_range(0..rays.len())]));
            &batch
        };
        let (mut loss, mut gs, mut gc) =
            rgb_loss_gradient(&field, subset, &cfg.render, Some(rng.random()));
        loss += total_variation(&field, cfg.tv_density, cfg.tv_color, &mut gs, &mut gc);
        if !loss.is_finite() || gs.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "field loss became {loss} at iteration {it}"
            )));
        }
        let c1 = 1.0 - cfg.beta1.powi(it as i32);
        let c2 = 1.0 - cfg.beta2.powi(it as i32);
        let adam = |m: &mut f64, v: &mut f64, g: f64, lr: f64| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            -lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps)
        };
        for i in 0..n {
            if gs[i] != 0.0 || ms[i] != 0.0 {
                field.density[i] = (field.density[i]
                    + adam(&mut ms[i], &mut vs[i], gs[i], cfg.lr_density))
                .max(0.0);
            }
            for k in 0..3 {
                if gc[i][k] != 0.0 || mc[i][k] != 0.0 {
                    let d = adam(&mut mc[i][k], &mut vc[i][k], gc[i][k], cfg.lr_color);
                    field.color[i][k] = (field.color[i][k] + d).clamp(0.0, 1.0);
                }
            }
        }
        if it % eval_every == 0 || it == cfg.iterations {
            let full = training_loss(&field, rays, &cfg.render);
            if !full.is_finite() {
                return Err(Error::Diverged(format!(
                    "field loss became {full} at iteration {it}"
                )));
            }
            log::debug!("fit iteration {it}: loss {full:.6e}");
            rising = if full > history.last().unwrap().loss {
                rising + 1
            } else {
                0
            };
            history.push(FitRecord {
                iteration: it,
                loss: full,
                psnr: mse_psnr(full),
            });
            if full < best.0 {
                best = (full, it, field.clone());
            }
            if rising > cfg.patience {
                return Err(Error::Diverged(format!(
                    "field loss rose for {rising} consecutive evaluations"
                )));
            }
        }
    }
    let (_, best_iteration, field) = best;
    Ok(FitResult {
        field,
        history,
        best_iteration,
    })
}

/// PSNR of `render_image` against `truth` with peak 1.
pub fn render_psnr(field: &VoxelField, cam: &Camera, truth: &Image, opts: &RenderOptions) -> f64 {
    mse_psnr(mse(&render_image(field, cam, opts).0, truth))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    /// Per-vertex RGB in `[0, 1]`.
    pub colors: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

/// Six tetrahedra around the cube diagonal from corner 0 to corner 7, with
/// corner index `x + 2y + 4z`. Every cube uses the same split, so shared
/// faces are cut along the same diagonal.
const TETRAHEDRA: [[usize; 4]; 6] = [
    [0, 1, 3, 7],
    [0, 3, 2, 7],
    [0, 2, 6, 7],
    [0, 6, 4, 7],
    [0, 4, 5, 7],
    [0, 5, 1, 7],
];

/// Iso-surface `σ = iso_level` by marching tetrahedra over the lattice of
/// voxel centers, padded with one layer of zero density so that surfaces
/// reaching the grid border are closed. Vertex colors are sampled from the
/// field; triangles face toward lower density.
pub fn export_mesh(field: &VoxelField, iso_level: f64) -> Result<Mesh> {
    let max = field.max_density();
    if !(iso_level > 0.0) || iso_level >= max {
        return Err(Error::EmptySurface {
            iso: iso_level,
            max,
        });
    }
    let [nx, ny, nz] = field.resolution.map(|n| n as i64);
    let value = |p: [i64; 3]| -> f64 {
        if p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= nx || p[1] >= ny || p[2] >= nz {
            0.0
        } else {
            field.density[field.index(p[0] as usize, p[1] as usize, p[2] as usize)]
        }
    };
    let s = field.voxel_size();
    let position = |p: [i64; 3]| {
        Vector3::new(
            field.min[0] + (p[0] as f64 + 0.5) * s[0],
            field.min[1] + (p[1] as f64 + 0.5) * s[1],
            field.min[2] + (p[2] as f64 + 0.5) * s[2],
        )
    };
    let key = |p: [i64; 3]| ((p[0] + 1) * (ny + 2) + (p[1] + 1)) * (nz + 2) + (p[2] + 1);
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(i64, i64), usize> = HashMap::new();
    let mut vertex = |a: [i64; 3], b: [i64; 3], mesh: &mut Mesh| -> usize {
        let (ka, kb) = (key(a), key(b));
        let k = if ka < kb { (ka, kb) } else { (kb, ka) };
        *edge_vertex.entry(k).or_insert_with(|| {
            let (va, vb) = (value(a), value(b));
            let t = ((iso_level - va) / (vb - va)).clamp(0.0, 1.0);
            let p = position(a) + (position(b) - position(a)) * t;
            mesh.vertices.push([p.x, p.y, p.z]);
            mesh.colors.push(field.sample(&p).1);
            mesh.vertices.len() - 1
        })
    };
    for ix in -1..nx {
        for iy in -1..ny {
            for iz in -1..nz {
                let corner = |c: usize| {
                    [
                        ix + (c & 1) as i64,
                        iy + ((c >> 1) & 1) as i64,
                        iz + ((c >> 2) & 1) as i64,
                    ]
                };
                let vals: [f64; 8] = std::array::from_fn(|c| value(corner(c)));
                if vals.iter().all(|v| *v > iso_level) || vals.iter().all(|v| *v <= iso_level) {
                    continue;
                }
                for tet in TETRAHEDRA {
                    let pts = tet.map(corner);
                    let inside: Vec<usize> =
                        (0..4).filter(|&i| value(pts[i]) > iso_level).collect();
                    let outside: Vec<usize> =
                        (0..4).filter(|&i| value(pts[i]) <= iso_level).collect();
                    let polys: Vec<Vec<(usize, usize)>> = match inside.len() {
                        1 => vec![outside.iter().map(|&o| (inside[0], o)).collect()],
                        3 => vec![inside.iter().map(|&i| (i, outside[0])).collect()],
                        2 => {
                            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
                            vec![vec![(a, c), (a, d), (b, d)], vec![(a, c), (b, d), (b, c)]]
                        }
                        _ => vec![],
                    };
                    let cin = inside
                        .iter()
                        .map(|&i| position(pts[i]))
                        .sum::<Vector3<f64>>()
                        / inside.len().max(1) as f64;
                    let cout = outside
                        .iter()
                        .map(|&i| position(pts[i]))
                        .sum::<Vector3<f64>>()
                        / outside.len().max(1) as f64;
                    for poly in polys {
                        let mut tri = [0; 3];
                        for (slot, &(i, o)) in tri.iter_mut().zip(&poly) {
                            *slot = vertex(pts[i], pts[o], &mut mesh);
                        }
                        if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                            continue;
                        }
                        let v = |i: usize| Vector3::from(mesh.vertices[tri[i]]);
                        let normal = (v(1) - v(0)).cross(&(v(2) - v(0)));
                        if normal.dot(&(cout - cin)) < 0.0 {
                            tri.swap(1, 2);
                        }
                        mesh.triangles.push(tri);
                    }
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::EmptySurface {
            iso: iso_level,
            max,
        });
    }
    Ok(mesh)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn color_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Mesh {
    /// OBJ with `v x y z r g b` lines (colors in `[0, 1]`) and 1-based faces.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut out = String::from("# vertex lines carry r g b in [0, 1] after the position\n");
        for (p, c) in self.vertices.iter().zip(&self.colors) {
            out.push_str(&format!(
                "v {} {} {} {} {} {}\n",
                p[0], p[1], p[2], c[0], c[1], c[2]
            ));
        }
        for t in &self.triangles {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        write_file(path, out.as_bytes())
    }

    pub fn read_obj(path: &Path) -> Result<Mesh> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad =
            |line: &str| Error::InvalidSpec(format!("{}: bad OBJ line {line:?}", path.display()));
        let mut mesh = Mesh::default();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let nums: Vec<f64> = parts
                        .map(|p| p.parse().map_err(|_| bad(&line)))
                        .collect::<Result<_>>()?;
                    match nums.len() {
                        3 => mesh.colors.push([1.0; 3]),
                        6 => mesh.colors.push([nums[3], nums[4], nums[5]]),
                        _ => return Err(bad(&line)),
                    }
                    mesh.vertices.push([nums[0], nums[1], nums[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = parts
                        .map(|p| {
                            p.split('/')
                                .next()
                                .unwrap_or("")
                                .parse::<usize>()
                                .map_err(|_| bad(&line))
                        })
                        .collect::<Result<_>>()?;
                    if idx.len() != 3 || idx.iter().any(|&i| i == 0) {
                        return Err(bad(&line));
                    }
                    mesh.triangles.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        mesh.check(path)?;
        Ok(mesh)
    }

    /// Binary little-endian PLY with float `x y z`, uchar `red green blue`
    /// and `uchar`-counted `int` face lists.
    pub fn write_ply(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nelement face {}\n\
             property list uchar int vertex_indices\nend_header\n",
            self.vertices.len(),
            self.triangles.len()
        );
        out.extend_from_slice(header.as_bytes());
        for (p, c) in self.vertices.iter().zip(&self.colors) {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.extend(c.map(color_byte));
        }
        for t in &self.triangles {
            out.push(3);
            for i in t {
                out.extend_from_slice(&(*i as i32).to_le_bytes());
            }
        }
        write_file(path, &out)
    }

    /// Reads the PLY layout written by [`Mesh::write_ply`].
    pub fn read_ply(path: &Path) -> Result<Mesh> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |why: &str| Error::InvalidSpec(format!("{}: {why}", path.display()));
        let mut reader = BufReader::new(file);
        let (mut nv, mut nf) = (None, None);
        let mut line = String::new();
        loop {
            line.clear();
            if reader
                .read_line(&mut line)
                .map_err(|e| Error::io(path, e))?
                == 0
            {
                return Err(bad("PLY header has no end_header"));
            }
            let l = line.trim();
            if l == "end_header" {
                break;
            }
            if l.starts_with("format") && l != "format binary_little_endian 1.0" {
                return Err(bad("only binary little-endian PLY is supported"));
            }
            if let Some(n) = l.strip_prefix("element vertex ") {
                nv = n.parse::<usize>().ok();
            }
            if let Some(n) = l.strip_prefix("element face ") {
                nf = n.parse::<usize>().ok();
            }
        }
        let (nv, nf) = (
            nv.ok_or_else(|| bad("missing vertex count"))?,
            nf.ok_or_else(|| bad("missing face count"))?,
        );
        let mut body = Vec::new();
        reader
            .read_to_end(&mut body)
            .map_err(|e| Error::io(path, e))?;
        if body.len() != nv * 15 + nf * 13 {
            return Err(bad("PLY body size does not match the header"));
        }
        let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as f64;
        let mut mesh = Mesh::default();
        for i in 0..nv {
            let o = i * 15;
            mesh.vertices
                .push([f32_at(o), f32_at(o + 4), f32_at(o + 8)]);
            mesh.colors
                .push([body[o + 12], body[o + 13], body[o + 14]].map(|b| b as f64 / 255.0));
        }
        for i in 0..nf {
            let o = nv * 15 + i * 13;
            if body[o] != 3 {
                return Err(bad("only triangle faces are supported"));
            }
            let idx = |k: usize| {
                i32::from_le_bytes(body[o + 1 + 4 * k..o + 5 + 4 * k].try_into().unwrap())
            };
            let t = [idx(0), idx(1), idx(2)];
            if t.iter().any(|&v| v < 0) {
                return Err(bad("negative vertex index"));
            }
            mesh.triangles.push(t.map(|v| v as usize));
        }
        mesh.check(path)?;
        Ok(mesh)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("obj") => self.write_obj(path),
            _ => self.write_ply(path),
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        if self
            .triangles
            .iter()
            .flatten()
            .any(|&i| i >= self.vertices.len())
        {
            return Err(Error::InvalidSpec(format!(
                "{}: face index out of range",
                path.display()
            )));
        }
        Ok(())
    }
}
