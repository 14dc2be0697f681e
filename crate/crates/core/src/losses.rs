//! Training objectives: edge-aware depth smoothness, SSIM photometric loss,
//! RGB reconstruction loss, and the time-scheduled blends.

use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::image::{DepthMap, Image};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Blend factor of the scheduled losses for pinhole images.
pub const PINHOLE_BETA: f64 = -1e4;
/// Blend factor of the scheduled losses for fisheye images.
pub const FISHEYE_BETA: f64 = -1e3;
/// Weight of the pose-smoothness term in the bundle-adjustment objective.
pub const FBA_LAMBDA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// SSIM weight in the photometric loss.
    pub alpha: f64,
    /// Schedule exponent; `None` picks the per-mode default.
    pub beta: Option<f64>,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            beta: None,
            lambda: FBA_LAMBDA,
        }
    }
}

impl LossConfig {
    pub fn beta_for(&self, mode: CameraModel) -> f64 {
        self.beta.unwrap_or(match mode {
            CameraModel::Pinhole => PINHOLE_BETA,
            CameraModel::Fisheye => FISHEYE_BETA,
        })
    }
}

/// Mean over pixels of `|∂x D|·e^{−|∂x I|}` plus the same along `y`, using
/// forward differences and the channel-mean absolute image gradient. Pairs
/// touching an invalid depth are skipped.
pub fn depth_smoothness(depth: &DepthMap, image: &Image) -> f64 {
    assert_eq!(
        (depth.width, depth.height),
        (image.width, image.height),
        "depth and image sizes differ"
    );
    let (w, h) = (depth.width, depth.height);
    let grad_i = |x0: usize, y0: usize, x1: usize, y1: usize| {
        let (a, b) = (image.pixel(x0, y0), image.pixel(x1, y1));
        a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / image.channels as f64
    };
    let term = |x0: usize, y0: usize, x1: usize, y1: usize| -> Option<f64> {
        let (d0, d1) = (depth.get(x0, y0), depth.get(x1, y1));
        (d0.is_finite() && d1.is_finite())
            .then(|| (d1 - d0).abs() * (-grad_i(x0, y0, x1, y1)).exp())
    };
    let mean = |it: &mut dyn Iterator<Item = Option<f64>>| {
        let (mut s, mut n) = (0.0, 0usize);
        for v in it.flatten() {
            s += v;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let gx = mean(
        &mut (0..h)
            .flat_map(|y| (0..w.saturating_sub(1)).map(move |x| (x, y)))
            .map(|(x, y)| term(x, y, x + 1, y)),
    );
    let gy = mean(
        &mut (0..h.saturating_sub(1))
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| term(x, y, x, y + 1)),
    );
    gx + gy
}

/// Edge-aware smoothness on the grid of every `stride`-th pixel, together
/// with its gradient with respect to each depth value. Neighbor pairs are
/// `stride` pixels apart; off-grid entries of the gradient are zero. With
/// `stride = 1` the value equals [`depth_smoothness`].
pub fn depth_smoothness_grad(depth: &DepthMap, image: &Image, stride: usize) -> (f64, Vec<f64>) {
    assert_eq!(
        (depth.width, depth.height),
        (image.width, image.height),
        "depth and image sizes differ"
    );
    let (w, h, s) = (depth.width, depth.height, stride.max(1));
    let mut pairs: [Vec<(usize, usize, f64)>; 2] = [Vec::new(), Vec::new()];
    for y in (0..h).step_by(s) {
        for x in (0..w).step_by(s) {
            for (axis, (x1, y1)) in [(x + s, y), (x, y + s)].into_iter().enumerate() {
                if x1 >= w || y1 >= h {
                    continue;
                }
                let (i0, i1) = (y * w + x, y1 * w + x1);
                if !(depth.values[i0].is_finite() && depth.values[i1].is_finite()) {
                    continue;
                }
                let (a, b) = (image.pixel(x, y), image.pixel(x1, y1));
                let gi = a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>()
                    / image.channels as f64;
                pairs[axis].push((i0, i1, (-gi).exp()));
            }
        }
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; depth.values.len()];
    for axis in &pairs {
        if axis.is_empty() {
            continue;
        }
        let inv = 1.0 / axis.len() as f64;
        for &(i0, i1, e) in axis {
            let d = depth.values[i1] - depth.values[i0];
            value += d.abs() * e * inv;
            let g = if d == 0.0 { 0.0 } else { d.signum() * e * inv };
            grad[i1] += g;
            grad[i0] -= g;
        }
    }
    (value, grad)
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|j| k[j] * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|j| k[j] * tmp[(y + j) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5), computed per
/// channel and averaged. Images smaller than the window use the largest odd
/// window that fits.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b), "ssim inputs differ in shape");
    let size = SSIM_WINDOW.min(a.width).min(a.height);
    let size = if size % 2 == 0 { size - 1 } else { size };
    let k = gaussian_window(size);
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for c in 0..a.channels {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data[i * a.channels + c]).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data[i * b.channels + c]).collect();
        let prod =
            |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let (mu_a, ow, oh) = filter_valid(&pa, w, h, &k);
        let (mu_b, _, _) = filter_valid(&pb, w, h, &k);
        let (aa, _, _) = filter_valid(&prod(&pa, &pa), w, h, &k);
        let (bb, _, _) = filter_valid(&prod(&pb, &pb), w, h, &k);
        let (ab, _, _) = filter_valid(&prod(&pa, &pb), w, h, &k);
        let mut s = 0.0;
        for i in 0..ow * oh {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += s / (ow * oh) as f64;
    }
    total / a.channels as f64
}

/// Mean squared error over pixels and channels.
pub fn mse(a: &Image, b: &Image) -> f64 {
    assert!(a.same_shape(b), "mse inputs differ in shape");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len() as f64
}

/// `(1/N) Σ_j α(1 − SSIM(I'_j, I_o))/2 + (1 − α)·MSE(I'_j, I_o)`.
pub fn photometric_loss(warped: &[Image], target: &Image, alpha: f64) -> f64 {
    assert!(
        !warped.is_empty(),
        "photometric loss needs at least one view"
    );
    warped
        .iter()
        .map(|w| alpha * (1.0 - ssim(w, target)) / 2.0 + (1.0 - alpha) * mse(w, target))
        .sum::<f64>()
        / warped.len() as f64
}

pub fn rgb_loss(rendered: &Image, truth: &Image) -> f64 {
    mse(rendered, truth)
}

/// `C + λ·R_S`.
pub fn fba_objective(cost: f64, r_s: f64, lambda: f64) -> f64 {
    cost + lambda * r_s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub depth: f64,
    pub photo: f64,
    pub rgb: f64,
    pub fba: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub depth: f64,
    pub photo: f64,
    pub rgb: f64,
    pub fba: f64,
    pub total: f64,
    pub blend_weight: f64,
}

/// Pinhole: `w(L_depth + L_photo) + (1 − w)L_rgb`; fisheye:
/// `w(L_FBA + L_photo) + (1 − w)L_rgb`, with `w = e^{βt}`.
pub fn scheduled_loss(c: &LossComponents, t: f64, beta: f64, mode: CameraModel) -> LossBreakdown {
    let w = (beta * t).exp();
    let first = match mode {
        CameraModel::Pinhole => c.depth + c.photo,
        CameraModel::Fisheye => c.fba + c.photo,
    };
    LossBreakdown {
        depth: c.depth,
        photo: c.photo,
        rgb: c.rgb,
        fba: c.fba,
        total: w * first + (1.0 - w) * c.rgb,
        blend_weight: w,
    }
}
