//! Feature-metric warping costs.
//!
//! For every evaluated target pixel `x` with depth `D(x)`:
//!
//! ```text
//! C(x) = (1/N) Σ_i ‖F_i(Π_i(T_i · Π_o⁻¹(x, D(x)))) − F_o(x)‖₂
//! ```
//!
//! where `T_i` maps target camera coordinates to neighbor `i` camera
//! coordinates and the average runs over neighbors whose warp lands inside
//! the image. The reported value is the mean of `C(x)` over pixels with at
//! least one valid warp.
//!
//! Gradients are taken with respect to left perturbations `exp(δ) ∘ T`,
//! `δ = (ω, ρ)`, per-pixel depth, and the distortion coefficients shared by
//! all fisheye cameras. Samples are placed on the level-0 pixel grid and read
//! features from the requested pyramid level at the matching coordinates.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, FisheyeCamera, PinholeCamera};
use crate::error::{Error, Result};
use crate::features::{level_coordinate, FeatureLevel, FeaturePyramid, FEATURE_CHANNELS};
use crate::geometry::{skew, PoseSE3};
use crate::image::{DepthMap, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct CostOptions {
    /// Pyramid level features are read from.
    pub level: usize,
    /// Spacing of evaluated level-0 pixels.
    pub stride: usize,
    /// Border band, in level pixels, excluded in both target and neighbors.
    pub margin: f64,
    pub gradients: bool,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            level: 0,
            stride: 1,
            margin: 2.0,
            gradients: true,
        }
    }
}

/// Bilinear cells and validity recorded by one evaluation. Replaying them
/// turns the cost into a smooth function of the parameters, which is what
/// finite-difference checks need.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLock {
    cells: Vec<Option<(u32, u32)>>,
    neighbors: usize,
}

#[derive(Clone, Debug)]
pub struct CostEvaluation {
    pub value: f64,
    pub width: usize,
    pub height: usize,
    /// Level-0 sized map; zero where not evaluated or invalid.
    pub per_pixel: Vec<f64>,
    pub valid_mask: Vec<bool>,
    pub valid_count: usize,
    /// Per neighbor: left-perturbation gradient of the neighbor transform
    /// (relative `T_i` for pinhole, absolute pose for fisheye).
    pub grad_pose: Vec<Vector6<f64>>,
    /// Gradient with respect to the target pose (fisheye only).
    pub grad_target_pose: Option<Vector6<f64>>,
    /// Level-0 sized map; nonzero only at evaluated pixels.
    pub grad_depth: Vec<f64>,
    pub grad_distortion: Option<Vector3<f64>>,
    pub lock: SampleLock,
}

impl CostEvaluation {
    /// Per-pixel cost as a grayscale image scaled so the largest value is white.
    pub fn cost_image(&self) -> Image {
        let max = self
            .per_pixel
            .iter()
            .copied()
            .fold(0.0, f64::max)
            .max(1e-12);
        Image::from_fn(self.width, self.height, 1, |x, y| {
            vec![self.per_pixel[y * self.width + x] / max]
        })
    }
}

/// Where the fisheye inverse projection gets its per-pixel range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSourceKind {
    GroundTruth,
    Estimate,
    Hypotheses,
}

/// Inverse-depth sweep used when no depth map is available.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthHypotheses {
    pub count: usize,
    pub near: f64,
    pub far: f64,
}

impl Default for DepthHypotheses {
    fn default() -> Self {
        Self {
            count: 32,
            near: 0.5,
            far: 20.0,
        }
    }
}

struct Warp<'a> {
    cam: &'a Camera,
    rot: Matrix3<f64>,
    t: Vector3<f64>,
    level: &'a FeatureLevel,
}

struct Target<'a> {
    cam: &'a Camera,
    level: &'a FeatureLevel,
}

/// Unit-depth direction for the camera's depth convention and its
/// derivative with respect to the distortion coefficients.
#[inline]
fn target_direction(cam: &Camera, u: f64, v: f64) -> (Vector3<f64>, Matrix3<f64>) {
    match cam {
        Camera::Pinhole { intrinsics, .. } => (intrinsics.bearing(u, v), Matrix3::zeros()),
        Camera::Fisheye(f) => f.ray_direction_camera_with_k_jacobian(u, v),
    }
}

#[inline]
fn project_full(
    cam: &Camera,
    p: &Vector3<f64>,
) -> Option<(Vector2<f64>, Matrix2x3<f64>, Matrix2x3<f64>)> {
    match cam {
        Camera::Pinhole { intrinsics, .. } => intrinsics
            .project_with_jacobian(p)
            .ok()
            .map(|(uv, j)| (uv, j, Matrix2x3::zeros())),
        Camera::Fisheye(f) => f
            .project_camera_frame_with_jacobians(p)
            .ok()
            .map(|r| (r.pixel, r.d_point, r.d_k)),
    }
}

#[inline]
fn inside(level: &FeatureLevel, x: f64, y: f64, margin: f64) -> bool {
    x >= margin
        && y >= margin
        && x <= level.width as f64 - 1.0 - margin
        && y <= level.height as f64 - 1.0 - margin
}

struct Grid {
    stride: usize,
    gw: usize,
    gh: usize,
}

impl Grid {
    fn new(width: usize, height: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        Self {
            stride,
            gw: width.div_ceil(stride),
            gh: height.div_ceil(stride),
        }
    }
}

#[derive(Default)]
struct RowAccum {
    cost_sum: f64,
    count: usize,
    per_pixel: Vec<(usize, f64)>,
    grad_rel: Vec<Vector6<f64>>,
    grad_depth: Vec<(usize, f64)>,
    grad_k: Vector3<f64>,
    cells: Vec<Option<(u32, u32)>>,
}

/// Mean feature distance of one target pixel at a given depth, without
/// gradients. `None` when no warp is valid.
fn pixel_cost(
    target: &Target,
    f_o: &[f64],
    warps: &[Warp],
    u: f64,
    v: f64,
    depth: f64,
    opts: &CostOptions,
) -> Option<f64> {
    let (dir, _) = target_direction(target.cam, u, v);
    let p_o = dir * depth;
    let mut f_i = [0.0; FEATURE_CHANNELS];
    let (mut sum, mut n) = (0.0, 0usize);
    for w in warps {
        let p_i = w.rot * p_o + w.t;
        let Ok(uv) = w.cam.project_camera_frame(&p_i) else {
            continue;
        };
        let (xl, yl) = (
            level_coordinate(uv.x, opts.level),
            level_coordinate(uv.y, opts.level),
        );
        if !inside(w.level, xl, yl, opts.margin) {
            continue;
        }
        let (cx, cy) = w.level.cell(xl, yl);
        w.level.sample_in_cell(xl, yl, cx, cy, &mut f_i, None);
        sum += f_i
            .iter()
            .zip(f_o)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn evaluate(
    target: &Target,
    warps: &[Warp],
    depth: &DepthMap,
    opts: &CostOptions,
    lock: Option<&SampleLock>,
) -> Result<CostEvaluation> {
    let (width, height) = (target.cam.width(), target.cam.height());
    if depth.width != width || depth.height != height {
        return Err(Error::DimensionMismatch(format!(
            "depth map is {}x{}, camera is {width}x{height}",
            depth.width, depth.height
        )));
    }
    let grid = Grid::new(width, height, opts.stride);
    let n = warps.len();
    if let Some(l) = lock {
        if l.neighbors != n || l.cells.len() != grid.gw * grid.gh * n {
            return Err(Error::DimensionMismatch(
                "sample lock does not match this evaluation".into(),
            ));
        }
    }
    let inv_s = 1.0 / (1usize << opts.level) as f64;
    let rows: Vec<RowAccum> = (0..grid.gh)
        .into_par_iter()
        .map(|gy| {
            let mut acc = RowAccum {
                grad_rel: vec![Vector6::zeros(); n],
                cells: Vec::with_capacity(grid.gw * n),
                ..Default::default()
            };
            let mut f_o = [0.0; FEATURE_CHANNELS];
            let mut f_i = [0.0; FEATURE_CHANNELS];
            let (mut gx, mut gy_) = ([0.0; FEATURE_CHANNELS], [0.0; FEATURE_CHANNELS]);
            let mut pix_rel = vec![Vector6::zeros(); n];
            let y = gy * grid.stride;
            for gxi in 0..grid.gw {
                let x = gxi * grid.stride;
                let base = (gy * grid.gw + gxi) * n;
                let mut cells = vec![None; n];
                let record = |acc: &mut RowAccum, cells: &[Option<(u32, u32)>]| {
                    acc.cells.extend_from_slice(cells)
                };
                let (xo, yo) = (
                    level_coordinate(x as f64, opts.level),
                    level_coordinate(y as f64, opts.level),
                );
                let d = depth.get(x, y);
                if !inside(target.level, xo, yo, opts.margin) || !(d.is_finite() && d > 0.0) {
                    record(&mut acc, &cells);
                    continue;
                }
                let (cx, cy) = target.level.cell(xo, yo);
                target.level.sample_in_cell(xo, yo, cx, cy, &mut f_o, None);
                let (dir, jdir) = target_direction(target.cam, x as f64, y as f64);
                let p_o = dir * d;
                let (mut sum, mut count) = (0.0, 0usize);
                let (mut g_d, mut g_k) = (0.0, Vector3::zeros());
                for (i, w) in warps.iter().enumerate() {
                    pix_rel[i] = Vector6::zeros();
                    let locked = lock.map(|l| l.cells[base + i]);
                    if locked == Some(None) {
                        continue;
                    }
                    let p_i = w.rot * p_o + w.t;
                    let Some((uv, d_point, d_k)) = project_full(w.cam, &p_i) else {
                        continue;
                    };
                    let (xl, yl) = (
                        level_coordinate(uv.x, opts.level),
                        level_coordinate(uv.y, opts.level),
                    );
                    let cell = match locked {
                        Some(Some((a, b))) => (a as usize, b as usize),
                        _ => {
                            if !inside(w.level, xl, yl, opts.margin) {
                                continue;
                            }
                            w.level.cell(xl, yl)
                        }
                    };
                    cells[i] = Some((cell.0 as u32, cell.1 as u32));
                    w.level.sample_in_cell(
                        xl,
                        yl,
                        cell.0,
                        cell.1,
                        &mut f_i,
                        Some((&mut gx, &mut gy_)),
                    );
                    let mut r2 = 0.0;
                    for c in 0..FEATURE_CHANNELS {
                        r2 += (f_i[c] - f_o[c]).powi(2);
                    }
                    let norm = r2.sqrt();
                    sum += norm;
                    count += 1;
                    if !opts.gradients || norm == 0.0 {
                        continue;
                    }
                    let (mut a, mut b) = (0.0, 0.0);
                    for c in 0..FEATURE_CHANNELS {
                        let r = f_i[c] - f_o[c];
                        a += r * gx[c];
                        b += r * gy_[c];
                    }
                    let g_u = Vector2::new(a, b) * (inv_s / norm);
                    let g_p: Vector3<f64> = d_point.transpose() * g_u;
                    let g_omega = p_i.cross(&g_p);
                    pix_rel[i] = Vector6::new(g_omega.x, g_omega.y, g_omega.z, g_p.x, g_p.y, g_p.z);
                    let g_po = w.rot.transpose() * g_p;
                    g_d += g_po.dot(&dir);
                    g_k += jdir.transpose() * g_po * d + d_k.transpose() * g_u;
                }
                record(&mut acc, &cells);
                if count == 0 {
                    continue;
                }
                let inv = 1.0 / count as f64;
                let c = sum * inv;
                acc.cost_sum += c;
                acc.count += 1;
                acc.per_pixel.push((y * width + x, c));
                if opts.gradients {
                    for i in 0..n {
                        acc.grad_rel[i] += pix_rel[i] * inv;
                    }
                    acc.grad_depth.push((y * width + x, g_d * inv));
                    acc.grad_k += g_k * inv;
                }
            }
            acc
        })
        .collect();

    let mut total = 0.0;
    let mut count = 0usize;
    let mut per_pixel = vec![0.0; width * height];
    let mut valid_mask = vec![false; width * height];
    let mut grad_rel = vec![Vector6::zeros(); n];
    let mut grad_depth = vec![0.0; width * height];
    let mut grad_k = Vector3::zeros();
    let mut cells = Vec::with_capacity(grid.gw * grid.gh * n);
    for row in rows {
        total += row.cost_sum;
        count += row.count;
        for (i, c) in row.per_pixel {
            per_pixel[i] = c;
            valid_mask[i] = true;
        }
        for (a, b) in grad_rel.iter_mut().zip(&row.grad_rel) {
            *a += b;
        }
        for (i, g) in row.grad_depth {
            grad_depth[i] = g;
        }
        grad_k += row.grad_k;
        cells.extend(row.cells);
    }
    if count == 0 {
        return Err(Error::NoValidPixels);
    }
    let inv = 1.0 / count as f64;
    grad_rel.iter_mut().for_each(|g| *g *= inv);
    grad_depth.iter_mut().for_each(|g| *g *= inv);
    Ok(CostEvaluation {
        value: total * inv,
        width,
        height,
        per_pixel,
        valid_mask,
        valid_count: count,
        grad_pose: grad_rel,
        grad_target_pose: None,
        grad_depth,
        grad_distortion: Some(grad_k * inv),
        lock: SampleLock {
            cells,
            neighbors: n,
        },
    })
}

/// Adjoint of `X` acting on `(ω, ρ)` tangent vectors.
pub fn adjoint(x: &PoseSE3) -> Matrix6<f64> {
    let r = x.rotation();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&x.t) * r));
    m
}

/// Cost over depth and relative poses for pinhole cameras.
///
/// `poses[i]` maps target camera coordinates to neighbor `i` camera
/// coordinates; `depth` holds target z-depth.
pub fn pinhole_cost(
    target: &FeaturePyramid,
    target_cam: &PinholeCamera,
    neighbors: &[(&FeaturePyramid, PinholeCamera)],
    poses: &[PoseSE3],
    depth: &DepthMap,
    opts: &CostOptions,
    lock: Option<&SampleLock>,
) -> Result<CostEvaluation> {
    if neighbors.is_empty() || neighbors.len() != poses.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} neighbors but {} relative poses",
            neighbors.len(),
            poses.len()
        )));
    }
    let tcam = Camera::Pinhole {
        intrinsics: *target_cam,
        pose: PoseSE3::identity(),
    };
    let ncams: Vec<Camera> = neighbors
        .iter()
        .map(|(_, c)| Camera::Pinhole {
            intrinsics: *c,
            pose: PoseSE3::identity(),
        })
        .collect();
    let warps: Vec<Warp> = neighbors
        .iter()
        .zip(&ncams)
        .zip(poses)
        .map(|(((f, _), cam), p)| Warp {
            cam,
            rot: p.rotation(),
            t: p.t,
            level: f.level(opts.level),
        })
        .collect();
    let tgt = Target {
        cam: &tcam,
        level: target.level(opts.level),
    };
    let mut eval = evaluate(&tgt, &warps, depth, opts, lock)?;
    eval.grad_distortion = None;
    Ok(eval)
}

fn fisheye_setup<'a>(
    target_cam: &FisheyeCamera,
    neighbors: &[(&'a FeaturePyramid, FisheyeCamera)],
) -> (Camera, Vec<Camera>, Vec<PoseSE3>) {
    let tcam = Camera::Fisheye(*target_cam);
    let ncams: Vec<Camera> = neighbors.iter().map(|(_, c)| Camera::Fisheye(*c)).collect();
    let rel: Vec<PoseSE3> = neighbors
        .iter()
        .map(|(_, c)| c.pose.inverse().compose(&target_cam.pose))
        .collect();
    (tcam, ncams, rel)
}

/// Cost over absolute fisheye poses and shared distortion.
///
/// `depth` holds target range along the unit pixel ray. All cameras are
/// expected to share the same distortion coefficients; the distortion
/// gradient assumes they move together.
pub fn fisheye_cost(
    target: &FeaturePyramid,
    target_cam: &FisheyeCamera,
    neighbors: &[(&FeaturePyramid, FisheyeCamera)],
    depth: &DepthMap,
    opts: &CostOptions,
    lock: Option<&SampleLock>,
) -> Result<CostEvaluation> {
    if neighbors.is_empty() {
        return Err(Error::DimensionMismatch(
            "fisheye cost needs at least one neighbor".into(),
        ));
    }
    let (tcam, ncams, rel) = fisheye_setup(target_cam, neighbors);
    let warps: Vec<Warp> = neighbors
        .iter()
        .zip(&ncams)
        .zip(&rel)
        .map(|(((f, _), cam), p)| Warp {
            cam,
            rot: p.rotation(),
            t: p.t,
            level: f.level(opts.level),
        })
        .collect();
    let tgt = Target {
        cam: &tcam,
        level: target.level(opts.level),
    };
    let mut eval = evaluate(&tgt, &warps, depth, opts, lock)?;
    if opts.gradients {
        // T_i = P_i⁻¹ P_o: perturbing P_o by δ perturbs T_i by Ad(P_i⁻¹)δ,
        // perturbing P_i by δ perturbs T_i by −Ad(P_i⁻¹)δ.
        let mut g_target = Vector6::zeros();
        for ((_, cam), g) in neighbors.iter().zip(eval.grad_pose.iter_mut()) {
            let ad_t = adjoint(&cam.pose.inverse()).transpose();
            let mapped = ad_t * *g;
            g_target += mapped;
            *g = -mapped;
        }
        eval.grad_target_pose = Some(g_target);
    }
    Ok(eval)
}

/// Per-pixel range chosen by a plane sweep over inverse depth, refined by a
/// parabola through the best hypothesis and its neighbors. Pixels with no
/// valid hypothesis are left at `+∞`.
pub fn fisheye_sweep_depth(
    target: &FeaturePyramid,
    target_cam: &FisheyeCamera,
    neighbors: &[(&FeaturePyramid, FisheyeCamera)],
    hyp: &DepthHypotheses,
    opts: &CostOptions,
) -> DepthMap {
    let (tcam, ncams, rel) = fisheye_setup(target_cam, neighbors);
    let warps: Vec<Warp> = neighbors
        .iter()
        .zip(&ncams)
        .zip(&rel)
        .map(|(((f, _), cam), p)| Warp {
            cam,
            rot: p.rotation(),
            t: p.t,
            level: f.level(opts.level),
        })
        .collect();
    sweep(
        &Target {
            cam: &tcam,
            level: target.level(opts.level),
        },
        &warps,
        hyp,
        opts,
    )
}

fn sweep(target: &Target, warps: &[Warp], hyp: &DepthHypotheses, opts: &CostOptions) -> DepthMap {
    let (width, height) = (target.cam.width(), target.cam.height());
    let grid = Grid::new(width, height, opts.stride);
    let count = hyp.count.max(3);
    let (inv_far, inv_near) = (1.0 / hyp.far, 1.0 / hyp.near);
    let step = (inv_near - inv_far) / (count - 1) as f64;
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.gh)
        .into_par_iter()
        .map(|gy| {
            let y = gy * grid.stride;
            let mut out = Vec::new();
            let mut f_o = [0.0; FEATURE_CHANNELS];
            let mut costs = vec![None; count];
            for gxi in 0..grid.gw {
                let x = gxi * grid.stride;
                let (xo, yo) = (
                    level_coordinate(x as f64, opts.level),
                    level_coordinate(y as f64, opts.level),
                );
                if !inside(target.level, xo, yo, opts.margin) {
                    continue;
                }
                let (cx, cy) = target.level.cell(xo, yo);
                target.level.sample_in_cell(xo, yo, cx, cy, &mut f_o, None);
                for (j, c) in costs.iter_mut().enumerate() {
                    let d = 1.0 / (inv_far + step * j as f64);
                    *c = pixel_cost(target, &f_o, warps, x as f64, y as f64, d, opts);
                }
                let best = costs
                    .iter()
                    .enumerate()
                    .filter_map(|(j, c)| c.map(|c| (j, c)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let Some((j, c0)) = best else { continue };
                let mut offset = 0.0;
                if j > 0 && j + 1 < count {
                    if let (Some(cm), Some(cp)) = (costs[j - 1], costs[j + 1]) {
                        let den = cm - 2.0 * c0 + cp;
                        if den > 0.0 {
                            offset = (0.5 * (cm - cp) / den).clamp(-0.5, 0.5);
                        }
                    }
                }
                out.push((y * width + x, 1.0 / (inv_far + step * (j as f64 + offset))));
            }
            out
        })
        .collect();
    let mut depth = DepthMap::filled(width, height, f64::INFINITY);
    for row in rows {
        for (i, d) in row {
            depth.values[i] = d;
        }
    }
    depth
}

/// Neighbor colors resampled onto the target grid through `depth`.
/// Pixels without a valid warp keep the target color so they contribute
/// nothing to image-difference losses.
pub fn warp_image(
    target_cam: &Camera,
    target: &Image,
    neighbor_cam: &Camera,
    neighbor: &Image,
    depth: &DepthMap,
) -> Image {
    let rel = neighbor_cam.pose().inverse().compose(&target_cam.pose());
    let (rot, t) = (rel.rotation(), rel.t);
    let mut out = target.clone();
    let ch = target.channels;
    out.data
        .par_chunks_mut(target.width * ch)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..target.width {
                let d = depth.get(x, y);
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let p = rot * (target_direction(target_cam, x as f64, y as f64).0 * d) + t;
                let Ok(uv) = neighbor_cam.project_camera_frame(&p) else {
                    continue;
                };
                if !(uv.x >= 0.0
                    && uv.y >= 0.0
                    && uv.x <= (neighbor.width - 1) as f64
                    && uv.y <= (neighbor.height - 1) as f64)
                {
                    continue;
                }
                let (x0, y0) = (
                    (uv.x.floor() as usize).min(neighbor.width - 2),
                    (uv.y.floor() as usize).min(neighbor.height - 2),
                );
                let (fx, fy) = (uv.x - x0 as f64, uv.y - y0 as f64);
                for c in 0..ch {
                    let v = (1.0 - fx) * (1.0 - fy) * neighbor.get(x0, y0, c)
                        + fx * (1.0 - fy) * neighbor.get(x0 + 1, y0, c)
                        + (1.0 - fx) * fy * neighbor.get(x0, y0 + 1, c)
                        + fx * fy * neighbor.get(x0 + 1, y0 + 1, c);
                    row[x * ch + c] = v;
                }
            }
        });
    out
}

/// Largest relative difference between an analytic gradient and central
/// finite differences of `f` at `x`.
pub fn cost_gradient_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], eps: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let fp = f(&xp);
        xp[i] = x[i] - eps;
        let fm = f(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * eps);
        let den = fd.abs().max(grad[i].abs()).max(1e-10);
        worst = worst.max((fd - grad[i]).abs() / den);
    }
    worst
}
