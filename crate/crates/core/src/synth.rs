//! Analytic synthetic scenes: textured planes, spheres and boxes seen by a
//! rig of pinhole or fisheye cameras, rendered by exact ray intersection.
//!
//! World axes follow the camera convention: `y` points down, so a camera with
//! identity rotation looks along `+z` with `x` to the right.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraModel, FisheyeCamera, PinholeCamera};
use crate::error::{Error, Result};
use crate::geometry::{PoseSE3, Ray};
use crate::image::{DepthMap, Image};

const HIT_EPS: f64 = 1e-9;
/// Rays per side used to check that each camera sees geometry.
const COVERAGE_GRID: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSpec {
    pub seed: u64,
    /// Size of the coarsest noise cell, scene units.
    pub scale: f64,
    pub octaves: usize,
    /// Weight of the checkerboard in the mix, in `[0, 1]`.
    pub checker_weight: f64,
    /// Checker square size, scene units.
    pub checker_size: f64,
    /// When set, the texture repeats with this period along every axis.
    pub period: Option<f64>,
    pub textureless: bool,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scale: 0.25,
            octaves: 3,
            checker_weight: 0.3,
            checker_size: 0.5,
            period: None,
            textureless: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane through `point`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default)]
        texture: TextureSpec,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default)]
        texture: TextureSpec,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        #[serde(default)]
        texture: TextureSpec,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Layout {
    /// Cameras on a horizontal circle around `look_at`, all facing it.
    /// `arc_deg = 360` spaces `count` cameras evenly around the full circle;
    /// smaller arcs place the first and last camera at the arc ends.
    Ring {
        radius: f64,
        #[serde(default)]
        height: f64,
        #[serde(default)]
        look_at: [f64; 3],
        #[serde(default)]
        start_deg: f64,
        #[serde(default = "full_circle")]
        arc_deg: f64,
    },
    /// Identity-rotation cameras at `start + j·step`.
    Line {
        start: [f64; 3],
        step: [f64; 3],
    },
    Explicit {
        poses: Vec<PoseSE3>,
    },
}

fn full_circle() -> f64 {
    360.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigSpec {
    pub model: CameraModel,
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    #[serde(default)]
    pub cx: Option<f64>,
    #[serde(default)]
    pub cy: Option<f64>,
    #[serde(default)]
    pub k: [f64; 3],
    pub layout: Layout,
    /// Minimum fraction of each camera's view that must hit geometry.
    #[serde(default = "default_coverage")]
    pub min_coverage: f64,
}

fn default_supersample() -> usize {
    3
}

fn default_coverage() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub background: [f64; 3],
    /// Rays per pixel side for anti-aliased color.
    #[serde(default = "default_supersample")]
    pub supersample: usize,
    pub primitives: Vec<Primitive>,
    pub cameras: RigSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<Camera>,
    pub background: [f64; 3],
    /// Rays per pixel side when rendering color.
    pub supersample: usize,
    pub rng_seed: u64,
}

/// Camera-to-world pose at `center` facing `target`, `y` pointing down.
pub fn look_at(center: Vector3<f64>, target: Vector3<f64>) -> PoseSE3 {
    let z = (target - center).normalize();
    let up = Vector3::new(0.0, -1.0, 0.0);
    let mut x = z.cross(&up);
    if x.norm() < 1e-9 {
        x = Vector3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    PoseSE3::from_rotation_translation(&Matrix3::from_columns(&[x, y, z]), center)
}

fn rig_poses(spec: &RigSpec) -> Result<Vec<PoseSE3>> {
    Ok(match &spec.layout {
        Layout::Ring {
            radius,
            height,
            look_at: target,
            start_deg,
            arc_deg,
        } => {
            if !(*radius > 0.0) {
                return Err(Error::InvalidSpec("ring radius must be positive".into()));
            }
            let target = Vector3::from(*target);
            let full = (arc_deg - 360.0).abs() < 1e-12;
            let gaps = if full { spec.count } else { spec.count - 1 };
            (0..spec.count)
                .map(|j| {
                    let a = (start_deg + arc_deg * j as f64 / gaps as f64).to_radians();
                    let c = target + Vector3::new(radius * a.sin(), -height, -radius * a.cos());
                    look_at(c, target)
                })
                .collect()
        }
        Layout::Line { start, step } => (0..spec.count)
            .map(|j| {
                PoseSE3::from_translation(Vector3::from(*start) + Vector3::from(*step) * j as f64)
            })
            .collect(),
        Layout::Explicit { poses } => {
            if poses.len() != spec.count {
                return Err(Error::InvalidSpec(format!(
                    "{} explicit poses for {} cameras",
                    poses.len(),
                    spec.count
                )));
            }
            poses.clone()
        }
    })
}

fn validate_primitive(p: &Primitive) -> Result<()> {
    let tex = match p {
        Primitive::Plane {
            normal, texture, ..
        } => {
            if Vector3::from(*normal).norm() < 1e-12 {
                return Err(Error::InvalidSpec("plane normal is zero".into()));
            }
            texture
        }
        Primitive::Sphere {
            radius, texture, ..
        } => {
            if !(*radius > 0.0) {
                return Err(Error::InvalidSpec("sphere radius must be positive".into()));
            }
            texture
        }
        Primitive::Box { min, max, texture } => {
            if (0..3).any(|i| !(max[i] > min[i])) {
                return Err(Error::InvalidSpec(
                    "box max must exceed min on every axis".into(),
                ));
            }
            texture
        }
    };
    if !(tex.scale > 0.0 && tex.checker_size > 0.0) || tex.period.is_some_and(|p| !(p > 0.0)) {
        return Err(Error::InvalidSpec("texture sizes must be positive".into()));
    }
    Ok(())
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.primitives.is_empty() {
        return Err(Error::InvalidSpec(
            "scene needs at least one primitive".into(),
        ));
    }
    if spec.cameras.count < 2 {
        return Err(Error::InvalidSpec(
            "scene needs at least two cameras".into(),
        ));
    }
    spec.primitives.iter().try_for_each(validate_primitive)?;
    let r = &spec.cameras;
    let intr = PinholeCamera::new(
        r.fx,
        r.fy,
        r.cx.unwrap_or((r.width as f64 - 1.0) / 2.0),
        r.cy.unwrap_or((r.height as f64 - 1.0) / 2.0),
        r.width,
        r.height,
    )
    .map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let cameras = rig_poses(r)?
        .into_iter()
        .map(|pose| match r.model {
            CameraModel::Pinhole => Ok(Camera::Pinhole {
                intrinsics: intr,
                pose,
            }),
            CameraModel::Fisheye => FisheyeCamera::new(intr, pose, r.k)
                .map(Camera::Fisheye)
                .map_err(|e| Error::InvalidSpec(e.to_string())),
        })
        .collect::<Result<Vec<_>>>()?;
    let scene = SyntheticScene {
        primitives: spec.primitives.clone(),
        cameras,
        background: spec.background,
        supersample: spec.supersample,
        rng_seed: spec.seed,
    };
    for (j, cam) in scene.cameras.iter().enumerate() {
        let cov = scene.coverage(cam);
        if cov < r.min_coverage {
            return Err(Error::InvalidSpec(format!(
                "camera {j} sees geometry in {:.0}% of its view, need {:.0}%",
                cov * 100.0,
                r.min_coverage * 100.0
            )));
        }
    }
    Ok(scene)
}

impl Primitive {
    fn texture(&self) -> &TextureSpec {
        match self {
            Primitive::Plane { texture, .. }
            | Primitive::Sphere { texture, .. }
            | Primitive::Box { texture, .. } => texture,
        }
    }

    /// Smallest ray parameter `t > 0` at which the ray meets the surface.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match self {
            Primitive::Plane { point, normal, .. } => {
                let n = Vector3::from(*normal);
                let den = n.dot(&ray.direction);
                if den.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(Vector3::from(*point) - ray.origin)) / den;
                (t > HIT_EPS).then_some(t)
            }
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - Vector3::from(*center);
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                [-b - s, -b + s].into_iter().find(|&t| t > HIT_EPS)
            }
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    let d = ray.direction[i];
                    if d.abs() < 1e-15 {
                        if ray.origin[i] < min[i] || ray.origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let (a, b) = ((min[i] - ray.origin[i]) / d, (max[i] - ray.origin[i]) / d);
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    return None;
                }
                [t0, t1].into_iter().find(|&t| t > HIT_EPS)
            }
        }
    }

    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        texture_color(self.texture(), p)
    }
}

fn hash(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice_value(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    let h = hash(seed ^ hash(ix as u64 ^ hash(iy as u64 ^ hash(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise with smoothstep fade. With `period = Some(n)` the
/// lattice wraps every `n` cells.
fn value_noise(seed: u64, p: &Vector3<f64>, period: Option<i64>) -> f64 {
    let fl = p.map(f64::floor);
    let f = p - fl;
    let w = f.map(|t| t * t * (3.0 - 2.0 * t));
    let idx = |v: f64, o: i64| {
        let i = v as i64 + o;
        match period {
            Some(n) => i.rem_euclid(n),
            None => i,
        }
    };
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 1 { w.x } else { 1.0 - w.x };
                let wy = if dy == 1 { w.y } else { 1.0 - w.y };
                let wz = if dz == 1 { w.z } else { 1.0 - w.z };
                acc +=
                    wx * wy * wz * lattice_value(seed, idx(fl.x, dx), idx(fl.y, dy), idx(fl.z, dz));
            }
        }
    }
    acc
}

fn texture_colors(seed: u64) -> ([f64; 3], [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c010);
    let dark = [
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
    ];
    let bright = [
        rng.random_range(0.65..0.95),
        rng.random_range(0.65..0.95),
        rng.random_range(0.65..0.95),
    ];
    (dark, bright)
}

/// Solid procedural texture: multi-octave value noise mixed with a 3-D
/// checkerboard, blending two seeded colors.
pub fn texture_color(tex: &TextureSpec, p: &Vector3<f64>) -> [f64; 3] {
    let (a, b) = texture_colors(tex.seed);
    if tex.textureless {
        return [
            (a[0] + b[0]) / 2.0,
            (a[1] + b[1]) / 2.0,
            (a[2] + b[2]) / 2.0,
        ];
    }
    let (scale, cells, checker) = match tex.period {
        Some(period) => {
            let n = (period / tex.scale).round().max(1.0);
            let m = (period / (2.0 * tex.checker_size)).round().max(1.0);
            (period / n, Some(n as i64), period / (2.0 * m))
        }
        None => (tex.scale, None, tex.checker_size),
    };
    let mut noise = 0.0;
    let mut norm = 0.0;
    for o in 0..tex.octaves.max(1) {
        let f = (1u64 << o) as f64;
        let amp = 0.5f64.powi(o as i32);
        let q = p * (f / scale);
        noise += amp
            * value_noise(
                hash(tex.seed.wrapping_add(o as u64)),
                &q,
                cells.map(|n| n << o),
            );
        norm += amp;
    }
    noise /= norm;
    let c = p.map(|v| (v / checker).floor() as i64);
    let parity = ((c.x + c.y + c.z).rem_euclid(2)) as f64;
    let v = (1.0 - tex.checker_weight) * noise + tex.checker_weight * parity;
    [
        a[0] + v * (b[0] - a[0]),
        a[1] + v * (b[1] - a[1]),
        a[2] + v * (b[2] - a[2]),
    ]
}

impl SyntheticScene {
    /// Nearest surface hit: `(primitive index, t)`.
    pub fn trace(&self, ray: &Ray) -> Option<(usize, f64)> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(ray).map(|t| (i, t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn coverage(&self, cam: &Camera) -> f64 {
        let (w, h) = (cam.width() as f64 - 1.0, cam.height() as f64 - 1.0);
        let mut hits = 0;
        for j in 0..COVERAGE_GRID {
            for i in 0..COVERAGE_GRID {
                let u = w * (i as f64 + 0.5) / COVERAGE_GRID as f64;
                let v = h * (j as f64 + 0.5) / COVERAGE_GRID as f64;
                if self.trace(&cam.pixel_to_ray(u, v)).is_some() {
                    hits += 1;
                }
            }
        }
        hits as f64 / (COVERAGE_GRID * COVERAGE_GRID) as f64
    }

    /// Axis-aligned box around the bounded primitives, or `None` when every
    /// primitive is an unbounded plane.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.primitives {
            let (a, b) = match p {
                Primitive::Sphere { center, radius, .. } => {
                    (center.map(|c| c - radius), center.map(|c| c + radius))
                }
                Primitive::Box { min, max, .. } => (*min, *max),
                Primitive::Plane { .. } => continue,
            };
            for k in 0..3 {
                lo[k] = lo[k].min(a[k]);
                hi[k] = hi[k].max(b[k]);
            }
        }
        lo[0].is_finite().then_some((lo, hi))
    }

    /// Center-to-center diameter of the camera rig.
    pub fn diameter(&self) -> f64 {
        let poses: Vec<PoseSE3> = self.cameras.iter().map(|c| c.pose()).collect();
        scene_diameter(&poses)
    }
}

/// Largest distance between two camera centers.
pub fn scene_diameter(poses: &[PoseSE3]) -> f64 {
    let mut d = 0.0f64;
    for (i, a) in poses.iter().enumerate() {
        for b in &poses[i + 1..] {
            d = d.max((a.center() - b.center()).norm());
        }
    }
    d
}

/// Color and depth for every pixel of `cam`. Color is the box-filtered
/// average of `supersample²` rays spread over the pixel footprint; depth is
/// exact along the pixel-center ray. Missed samples contribute the
/// background color and a missed center ray gives `+∞` depth. Depth is
/// z-depth for pinhole cameras and range along the ray for fisheye cameras.
pub fn render_ground_truth(scene: &SyntheticScene, cam: &Camera) -> (Image, DepthMap) {
    let (w, h) = (cam.width(), cam.height());
    let ss = scene.supersample.max(1);
    let offsets: Vec<f64> = (0..ss)
        .map(|i| (i as f64 + 0.5) / ss as f64 - 0.5)
        .collect();
    let shade = |u: f64, v: f64| -> [f64; 3] {
        let ray = cam.pixel_to_ray(u, v);
        match scene.trace(&ray) {
            Some((i, t)) => scene.primitives[i].color_at(&ray.at(t)),
            None => scene.background,
        }
    };
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (u, v) = (x as f64, y as f64);
                    let ray = cam.pixel_to_ray(u, v);
                    let depth = match scene.trace(&ray) {
                        Some((_, t)) => match cam.model() {
                            CameraModel::Pinhole => t * cam.direction_camera(u, v).z,
                            CameraModel::Fisheye => t,
                        },
                        None => f64::INFINITY,
                    };
                    let mut c = [0.0; 3];
                    for oy in &offsets {
                        for ox in &offsets {
                            let s = shade(u + ox, v + oy);
                            for k in 0..3 {
                                c[k] += s[k];
                            }
                        }
                    }
                    let n = (ss * ss) as f64;
                    ([c[0] / n, c[1] / n, c[2] / n], depth)
                })
                .collect()
        })
        .collect();
    let mut img = Image::new(w, h, 3);
    let mut depth = DepthMap::filled(w, h, f64::INFINITY);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, (c, d)) in row.into_iter().enumerate() {
            img.pixel_mut(x, y).copy_from_slice(&c);
            depth.set(x, y, d);
        }
    }
    (img, depth)
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n: f64 = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Rotates each camera by exactly `rot_deg` about a random world axis and
/// shifts its center by exactly `trans_frac` times the rig diameter in a
/// random direction.
pub fn perturb_poses(cameras: &[Camera], rot_deg: f64, trans_frac: f64, seed: u64) -> Vec<Camera> {
    let poses: Vec<PoseSE3> = cameras.iter().map(|c| c.pose()).collect();
    let shift = trans_frac * scene_diameter(&poses);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cameras
        .iter()
        .map(|cam| {
            let axis = random_unit(&mut rng);
            let dir = random_unit(&mut rng);
            let omega = axis * rot_deg.to_radians();
            let p = cam.pose();
            let r = crate::geometry::rotation_from_axis_angle(&omega) * p.rotation();
            cam.with_pose(PoseSE3::from_rotation_translation(&r, p.t + dir * shift))
        })
        .collect()
}

/// Stand-in depth priors: `scale` times the true depth with a smooth
/// multiplicative error of relative amplitude up to `noise`. Invalid true
/// depth stays invalid.
pub fn synthetic_priors(depth: &[DepthMap], scale: f64, noise: f64, seed: u64) -> Vec<DepthMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    depth
        .iter()
        .map(|d| {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (fx, fy, phase): (f64, f64, f64) =
                (rng.random_range(3.0..7.0), rng.random_range(3.0..7.0), rng.random_range(0.0..std::f64::consts::TAU));
            let mut p = d.clone();
            for y in 0..d.height {
                for x in 0..d.width {
                    let (u, v) = (x as f64 / d.width as f64, y as f64 / d.height as f64);
                    let e = 0.5 * noise * (a * (fx * u + phase).sin() + b * (fy * v).cos());
                    let i = y * d.width + x;
                    p.values[i] = scale * d.values[i] * (1.0 + e);
                }
            }
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_distance_deg;
    use approx::assert_relative_eq;

    pub(crate) fn plane_spec(model: CameraModel) -> SceneSpec {
        SceneSpec {
            seed: 42,
            background: [0.0; 3],
            supersample: 1,
            primitives: vec![Primitive::Plane {
                point: [0.0, 0.0, 2.0],
                normal: [0.0, 0.0, -1.0],
                texture: TextureSpec::default(),
            }],
            cameras: RigSpec {
                model,
                count: 2,
                width: 64,
                height: 48,
                fx: 50.0,
                fy: 50.0,
                cx: None,
                cy: None,
                k: [0.0; 3],
                layout: Layout::Line {
                    start: [0.0; 3],
                    step: [0.1, 0.0, 0.0],
                },
                min_coverage: 0.5,
            },
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = plane_spec(CameraModel::Pinhole);
        let (a, b) = (
            generate_scene(&spec).unwrap(),
            generate_scene(&spec).unwrap(),
        );
        assert_eq!(a, b);
        assert_eq!(
            render_ground_truth(&a, &a.cameras[0]),
            render_ground_truth(&b, &b.cameras[0])
        );
    }

    #[test]
    fn ring_spacing_is_even() {
        let mut spec = plane_spec(CameraModel::Pinhole);
        spec.primitives = vec![Primitive::Sphere {
            center: [0.0; 3],
            radius: 1.0,
            texture: TextureSpec::default(),
        }];
        spec.cameras.count = 8;
        spec.cameras.fx = 80.0;
        spec.cameras.fy = 80.0;
        spec.cameras.layout = Layout::Ring {
            radius: 3.0,
            height: 0.0,
            look_at: [0.0; 3],
            start_deg: 0.0,
            arc_deg: 360.0,
        };
        let scene = generate_scene(&spec).unwrap();
        for j in 0..8 {
            let a = scene.cameras[j].pose().center();
            let b = scene.cameras[(j + 1) % 8].pose().center();
            assert_relative_eq!(a.angle(&b).to_degrees(), 45.0, epsilon = 1e-9);
            let ra = scene.cameras[j].pose().rotation();
            let rb = scene.cameras[(j + 1) % 8].pose().rotation();
            assert_relative_eq!(rotation_distance_deg(&ra, &rb), 45.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn camera_facing_away_rejected() {
        let mut spec = plane_spec(CameraModel::Pinhole);
        let away = PoseSE3::new(
            Vector3::new(0.0, std::f64::consts::PI, 0.0),
            Vector3::zeros(),
        );
        spec.cameras.layout = Layout::Explicit {
            poses: vec![PoseSE3::identity(), away],
        };
        assert!(matches!(generate_scene(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn head_on_plane_has_constant_depth() {
        let scene = generate_scene(&plane_spec(CameraModel::Pinhole)).unwrap();
        let (_, depth) = render_ground_truth(&scene, &scene.cameras[0]);
        for d in &depth.values {
            assert_relative_eq!(*d, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sphere_center_depth() {
        let mut spec = plane_spec(CameraModel::Fisheye);
        spec.cameras.width = 65;
        spec.cameras.height = 49;
        spec.cameras.k = [0.05, 0.0, 0.0];
        spec.primitives = vec![Primitive::Sphere {
            center: [0.0, 0.0, 3.0],
            radius: 1.0,
            texture: TextureSpec::default(),
        }];
        spec.cameras.layout = Layout::Explicit {
            poses: vec![PoseSE3::identity(); 2],
        };
        spec.cameras.min_coverage = 0.1;
        let scene = generate_scene(&spec).unwrap();
        let (_, depth) = render_ground_truth(&scene, &scene.cameras[0]);
        assert_relative_eq!(depth.get(32, 24), 2.0, epsilon = 1e-12);
        assert_eq!(depth.get(0, 0), f64::INFINITY);
    }

    #[test]
    fn missed_pixel_gets_background() {
        let mut spec = plane_spec(CameraModel::Pinhole);
        spec.background = [0.2, 0.4, 0.6];
        spec.primitives = vec![Primitive::Sphere {
            center: [0.0, 0.0, 3.0],
            radius: 1.0,
            texture: TextureSpec::default(),
        }];
        spec.cameras.fx = 60.0;
        spec.cameras.fy = 60.0;
        spec.cameras.min_coverage = 0.1;
        let scene = generate_scene(&spec).unwrap();
        let (img, depth) = render_ground_truth(&scene, &scene.cameras[0]);
        assert_eq!(img.pixel(0, 0), &[0.2, 0.4, 0.6]);
        assert!(depth.get(0, 0).is_infinite());
    }

    #[test]
    fn periodic_texture_repeats() {
        let tex = TextureSpec {
            period: Some(1.0),
            scale: 0.25,
            checker_size: 0.25,
            ..Default::default()
        };
        let p = Vector3::new(0.123, 0.456, 0.789);
        let q = p + Vector3::new(1.0, -2.0, 3.0);
        let (a, b) = (texture_color(&tex, &p), texture_color(&tex, &q));
        for i in 0..3 {
            assert_relative_eq!(a[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn perturbation_has_exact_magnitude() {
        let mut spec = plane_spec(CameraModel::Pinhole);
        spec.cameras.count = 4;
        let scene = generate_scene(&spec).unwrap();
        assert_eq!(perturb_poses(&scene.cameras, 0.0, 0.0, 1), scene.cameras);
        let p = perturb_poses(&scene.cameras, 3.0, 0.02, 1);
        let diam = scene.diameter();
        for (a, b) in scene.cameras.iter().zip(&p) {
            let d = rotation_distance_deg(&a.pose().rotation(), &b.pose().rotation());
            assert!((d - 3.0).abs() < 1e-9, "{d}");
            assert_relative_eq!(
                (a.pose().t - b.pose().t).norm(),
                0.02 * diam,
                epsilon = 1e-12
            );
        }
        assert_ne!(p, perturb_poses(&scene.cameras, 3.0, 0.02, 2));
    }
}
