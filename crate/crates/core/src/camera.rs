//! Pinhole and polynomial-fisheye camera models.
//!
//! The fisheye model maps a pixel's radial distance `r_d` from the principal
//! point to an undistorted incidence angle:
//!
//! ```text
//! θ_d = atan(r_d / f)
//! θ   = θ_d + k1·θ_d³ + k2·θ_d⁵ + k3·θ_d⁷
//! ```
//!
//! with `f = (fx + fy) / 2`. The camera-frame ray leaves the optical axis at
//! angle `θ` in the radial direction of the pixel. Projection inverts the
//! polynomial with a safeguarded Newton iteration.
//!
//! Poses are camera-to-world: directions are rotated into the world frame and
//! the ray origin is the camera center.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseSE3, Ray};

/// Samples used to validate monotonicity of the distortion polynomial.
pub const MONOTONE_SAMPLES: usize = 256;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 50;

/// `r_d = 2f·sin(θ/2)`.
pub fn radial_distance_equisolid(f: f64, theta: f64) -> f64 {
    2.0 * f * (0.5 * theta).sin()
}

/// Inverse of [`radial_distance_equisolid`] for `r_d ≤ 2f`.
pub fn equisolid_angle(f: f64, r_d: f64) -> f64 {
    2.0 * (r_d / (2.0 * f)).clamp(-1.0, 1.0).asin()
}

/// Euclidean distance of `(u, v)` from the principal point.
pub fn pixel_radial_distance(cam: &PinholeCamera, u: f64, v: f64) -> f64 {
    (u - cam.cx).hypot(v - cam.cy)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got {fx}, {fy}"
            )));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Centered principal point, pixel centers at integer coordinates.
    pub fn centered(fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            fx,
            fy,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    /// Single focal length used by the fisheye polynomial.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Largest distance from the principal point to a pixel-center corner.
    pub fn corner_radius(&self) -> f64 {
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(u, v)| pixel_radial_distance(self, u, v))
            .fold(0.0, f64::max)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn project_with_jacobian(
        &self,
        p: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>)> {
        let uv = self.project(p)?;
        let iz = 1.0 / p.z;
        let j = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz * iz,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz * iz,
        );
        Ok((uv, j))
    }

    /// Point at z-depth `depth` along pixel `x`.
    pub fn unproject(&self, x: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(self.bearing(x.x, x.y) * depth)
    }

    /// Unnormalized pixel ray with unit z.
    pub fn bearing(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FisheyeCamera {
    pub intrinsics: PinholeCamera,
    /// Camera-to-world.
    pub pose: PoseSE3,
    pub k: [f64; 3],
    theta_d_max: f64,
}

/// Pixel of a projected point together with its derivatives.
#[derive(Clone, Copy, Debug)]
pub struct FisheyeProjection {
    pub pixel: Vector2<f64>,
    /// d(u, v) / d(camera-frame point)
    pub d_point: Matrix2x3<f64>,
    /// d(u, v) / d(k1, k2, k3)
    pub d_k: Matrix2x3<f64>,
}

impl FisheyeCamera {
    /// Uses the image-corner radius as the working domain.
    pub fn new(intrinsics: PinholeCamera, pose: PoseSE3, k: [f64; 3]) -> Result<Self> {
        let theta_d_max = (intrinsics.corner_radius() / intrinsics.focal()).atan();
        Self::with_domain(intrinsics, pose, k, theta_d_max)
    }

    pub fn with_domain(
        intrinsics: PinholeCamera,
        pose: PoseSE3,
        k: [f64; 3],
        theta_d_max: f64,
    ) -> Result<Self> {
        if !(theta_d_max > 0.0 && theta_d_max < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidCamera(format!(
                "working domain {theta_d_max} outside (0, π/2)"
            )));
        }
        let cam = Self {
            intrinsics,
            pose,
            k,
            theta_d_max,
        };
        for i in 0..MONOTONE_SAMPLES {
            let td = theta_d_max * i as f64 / (MONOTONE_SAMPLES - 1) as f64;
            if cam.theta_derivative(td) <= 0.0 {
                return Err(Error::NonMonotoneDomain {
                    theta: cam.theta_from_distorted(td),
                    max: cam.theta_from_distorted(theta_d_max),
                });
            }
        }
        Ok(cam)
    }

    pub fn with_pose(&self, pose: PoseSE3) -> Self {
        Self { pose, ..*self }
    }

    pub fn with_distortion(&self, k: [f64; 3]) -> Result<Self> {
        Self::with_domain(self.intrinsics, self.pose, k, self.theta_d_max)
    }

    pub fn focal(&self) -> f64 {
        self.intrinsics.focal()
    }

    pub fn theta_d_max(&self) -> f64 {
        self.theta_d_max
    }

    /// Largest incidence angle inside the working domain.
    pub fn max_theta(&self) -> f64 {
        self.theta_from_distorted(self.theta_d_max)
    }

    /// The odd polynomial `θ(θ_d)`.
    pub fn theta_from_distorted(&self, td: f64) -> f64 {
        let t2 = td * td;
        td * (1.0 + t2 * (self.k[0] + t2 * (self.k[1] + t2 * self.k[2])))
    }

    /// `dθ/dθ_d`.
    pub fn theta_derivative(&self, td: f64) -> f64 {
        let t2 = td * td;
        1.0 + t2 * (3.0 * self.k[0] + t2 * (5.0 * self.k[1] + t2 * 7.0 * self.k[2]))
    }

    /// Incidence angle for a pixel at radial distance `r_d`.
    pub fn undistort_angle(&self, r_d: f64) -> f64 {
        self.theta_from_distorted((r_d / self.focal()).atan())
    }

    /// Solves `θ(θ_d) = theta` for `θ_d` on the working domain.
    pub fn distort_angle(&self, theta: f64) -> Result<f64> {
        let max = self.max_theta();
        if !(theta >= 0.0) || theta > max + 1e-15 {
            return Err(Error::NonMonotoneDomain { theta, max });
        }
        if self.k == [0.0; 3] {
            return Ok(theta);
        }
        let (mut lo, mut hi) = (0.0, self.theta_d_max);
        let mut td = theta.min(hi);
        for _ in 0..NEWTON_MAX_ITERS {
            let g = self.theta_from_distorted(td) - theta;
            if g > 0.0 {
                hi = td;
            } else {
                lo = td;
            }
            let mut next = td - g / self.theta_derivative(td);
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - td).abs();
            td = next;
            if step < NEWTON_TOL {
                break;
            }
        }
        Ok(td)
    }

    /// Unit camera-frame direction of pixel `(u, v)`.
    pub fn ray_direction_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        self.ray_direction_camera_with_k_jacobian(u, v).0
    }

    /// Direction plus its derivative with respect to `(k1, k2, k3)` (columns).
    pub fn ray_direction_camera_with_k_jacobian(
        &self,
        u: f64,
        v: f64,
    ) -> (Vector3<f64>, Matrix3<f64>) {
        let (du, dv) = (u - self.intrinsics.cx, v - self.intrinsics.cy);
        let r_d = du.hypot(dv);
        if r_d == 0.0 {
            return (Vector3::z(), Matrix3::zeros());
        }
        let td = (r_d / self.focal()).atan();
        let theta = self.theta_from_distorted(td);
        let (s, c) = theta.sin_cos();
        let (ex, ey) = (du / r_d, dv / r_d);
        let dir = Vector3::new(s * ex, s * ey, c);
        let d_theta = Vector3::new(c * ex, c * ey, -s);
        let mut jac = Matrix3::zeros();
        let mut p = td * td * td;
        for i in 0..3 {
            jac.set_column(i, &(d_theta * p));
            p *= td * td;
        }
        (dir, jac)
    }

    /// World-frame ray through pixel `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Ray {
        let d = self
            .pose
            .transform_direction(&self.ray_direction_camera(u, v));
        Ray::new(self.pose.center(), d)
    }

    pub fn project_camera_frame(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        Ok(self.project_camera_frame_with_jacobians(p)?.pixel)
    }

    pub fn project(&self, p_world: &Vector3<f64>) -> Result<Vector2<f64>> {
        let p = self.pose.inverse().transform_point(p_world);
        self.project_camera_frame(&p)
    }

    pub fn project_camera_frame_with_jacobians(
        &self,
        p: &Vector3<f64>,
    ) -> Result<FisheyeProjection> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { z: p.z });
        }
        let f = self.focal();
        let (cx, cy) = (self.intrinsics.cx, self.intrinsics.cy);
        let rho = p.x.hypot(p.y);
        if rho <= 1e-12 * p.z {
            // On the axis the model is locally a pinhole with focal f.
            let iz = 1.0 / p.z;
            return Ok(FisheyeProjection {
                pixel: Vector2::new(cx + f * p.x * iz, cy + f * p.y * iz),
                d_point: Matrix2x3::new(
                    f * iz,
                    0.0,
                    -f * p.x * iz * iz,
                    0.0,
                    f * iz,
                    -f * p.y * iz * iz,
                ),
                d_k: Matrix2x3::zeros(),
            });
        }
        let theta = rho.atan2(p.z);
        let td = self.distort_angle(theta)?;
        let sec2 = 1.0 + td.tan().powi(2);
        let r = f * td.tan();
        let a = r / rho;
        let pixel = Vector2::new(cx + a * p.x, cy + a * p.y);

        let dr_dtheta = f * sec2 / self.theta_derivative(td);
        let n2 = rho * rho + p.z * p.z;
        let dr_drho = dr_dtheta * p.z / n2;
        let da_drho = (dr_drho * rho - r) / (rho * rho);
        let da_dz = -dr_dtheta / n2;
        let (ex, ey) = (p.x / rho, p.y / rho);
        let d_point = Matrix2x3::new(
            a + p.x * da_drho * ex,
            p.x * da_drho * ey,
            p.x * da_dz,
            p.y * da_drho * ex,
            a + p.y * da_drho * ey,
            p.y * da_dz,
        );

        // Implicit derivative of θ_d at fixed θ: dθ_d/dk_i = −θ_d^(2i+1) / θ'(θ_d).
        let mut d_k = Matrix2x3::zeros();
        let mut pw = td * td * td;
        let inv = 1.0 / self.theta_derivative(td);
        for i in 0..3 {
            let dr = f * sec2 * (-pw * inv);
            d_k[(0, i)] = ex * dr;
            d_k[(1, i)] = ey * dr;
            pw *= td * td;
        }
        Ok(FisheyeProjection {
            pixel,
            d_point,
            d_k,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraModel {
    Pinhole,
    Fisheye,
}

/// A posed camera of either model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Camera {
    Pinhole {
        intrinsics: PinholeCamera,
        pose: PoseSE3,
    },
    Fisheye(FisheyeCamera),
}

impl Camera {
    pub fn model(&self) -> CameraModel {
        match self {
            Camera::Pinhole { .. } => CameraModel::Pinhole,
            Camera::Fisheye(_) => CameraModel::Fisheye,
        }
    }

    pub fn intrinsics(&self) -> &PinholeCamera {
        match self {
            Camera::Pinhole { intrinsics, .. } => intrinsics,
            Camera::Fisheye(f) => &f.intrinsics,
        }
    }

    pub fn pose(&self) -> PoseSE3 {
        match self {
            Camera::Pinhole { pose, .. } => *pose,
            Camera::Fisheye(f) => f.pose,
        }
    }

    pub fn with_pose(&self, pose: PoseSE3) -> Camera {
        match self {
            Camera::Pinhole { intrinsics, .. } => Camera::Pinhole {
                intrinsics: *intrinsics,
                pose,
            },
            Camera::Fisheye(f) => Camera::Fisheye(f.with_pose(pose)),
        }
    }

    pub fn distortion(&self) -> [f64; 3] {
        match self {
            Camera::Pinhole { .. } => [0.0; 3],
            Camera::Fisheye(f) => f.k,
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics().width
    }

    pub fn height(&self) -> usize {
        self.intrinsics().height
    }

    /// Unit camera-frame direction through pixel `(u, v)`.
    pub fn direction_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        match self {
            Camera::Pinhole { intrinsics, .. } => intrinsics.bearing(u, v).normalize(),
            Camera::Fisheye(f) => f.ray_direction_camera(u, v),
        }
    }

    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Ray {
        let pose = self.pose();
        Ray::new(
            pose.center(),
            pose.transform_direction(&self.direction_camera(u, v)),
        )
    }

    pub fn project_camera_frame(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        match self {
            Camera::Pinhole { intrinsics, .. } => intrinsics.project(p),
            Camera::Fisheye(f) => f.project_camera_frame(p),
        }
    }

    pub fn project(&self, p_world: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.project_camera_frame(&self.pose().inverse().transform_point(p_world))
    }

    /// Depth convention of this model: z for pinhole, range for fisheye.
    pub fn depth_of(&self, p_cam: &Vector3<f64>) -> f64 {
        match self {
            Camera::Pinhole { .. } => p_cam.z,
            Camera::Fisheye(_) => p_cam.norm(),
        }
    }

    /// Camera-frame point at pixel `(u, v)` and depth `depth`.
    pub fn unproject_camera_frame(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > 0.0) {
            return Err(Error::NonPositiveDepth(depth));
        }
        Ok(match self {
            Camera::Pinhole { intrinsics, .. } => intrinsics.bearing(u, v) * depth,
            Camera::Fisheye(f) => f.ray_direction_camera(u, v) * depth,
        })
    }

    pub fn to_record(&self) -> CameraRecord {
        let i = self.intrinsics();
        let k = self.distortion();
        CameraRecord {
            model: self.model(),
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
            k1: k[0],
            k2: k[1],
            k3: k[2],
            pose: self.pose(),
        }
    }

    pub fn from_record(r: &CameraRecord) -> Result<Camera> {
        let intrinsics = PinholeCamera::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        Ok(match r.model {
            CameraModel::Pinhole => Camera::Pinhole {
                intrinsics,
                pose: r.pose,
            },
            CameraModel::Fisheye => {
                Camera::Fisheye(FisheyeCamera::new(intrinsics, r.pose, [r.k1, r.k2, r.k3])?)
            }
        })
    }
}

/// One entry of `cameras.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub model: CameraModel,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub k3: f64,
    pub pose: PoseSE3,
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_fisheye(k: [f64; 3]) -> FisheyeCamera {
        // f = 1 with a principal point far enough from the corners to have a
        // wide working domain.
        let intr = PinholeCamera::new(1.0, 1.0, 2.0, 2.0, 5, 5).unwrap();
        FisheyeCamera::new(intr, PoseSE3::identity(), k).unwrap()
    }

    fn realistic_fisheye(k: [f64; 3], pose: PoseSE3) -> FisheyeCamera {
        let intr = PinholeCamera::centered(60.0, 58.0, 128, 96).unwrap();
        FisheyeCamera::new(intr, pose, k).unwrap()
    }

    #[test]
    fn equisolid_examples() {
        assert_eq!(radial_distance_equisolid(1.0, 0.0), 0.0);
        assert_relative_eq!(
            radial_distance_equisolid(1.0, FRAC_PI_2),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        assert_relative_eq!(radial_distance_equisolid(2.0, PI), 4.0, epsilon = 1e-15);
        assert_relative_eq!(
            equisolid_angle(1.5, radial_distance_equisolid(1.5, 1.2)),
            1.2,
            epsilon = 1e-14
        );
    }

    #[test]
    fn equisolid_is_monotone() {
        let mut prev = -1.0;
        for i in 1..1000 {
            let r = radial_distance_equisolid(1.0, PI * i as f64 / 1000.0);
            assert!(r > prev);
            prev = r;
        }
    }

    #[test]
    fn undistort_examples() {
        let cam = unit_fisheye([0.0; 3]);
        assert_relative_eq!(cam.undistort_angle(1.0), FRAC_PI_4, epsilon = 1e-15);
        assert_eq!(cam.undistort_angle(0.0), 0.0);
        let cam = unit_fisheye([0.1, 0.0, 0.0]);
        // π/4 + 0.1·(π/4)³
        let expected = FRAC_PI_4 + 0.1 * FRAC_PI_4.powi(3);
        assert_relative_eq!(cam.undistort_angle(1.0), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.8338455, epsilon = 1e-7);
    }

    #[test]
    fn distort_examples() {
        let cam = unit_fisheye([0.0; 3]);
        assert_eq!(cam.distort_angle(0.7).unwrap(), 0.7);
        let cam = unit_fisheye([0.1, 0.0, 0.0]);
        let td = cam
            .distort_angle(FRAC_PI_4 + 0.1 * FRAC_PI_4.powi(3))
            .unwrap();
        assert_relative_eq!(td, FRAC_PI_4, epsilon = 1e-12);
        assert!(matches!(
            cam.distort_angle(cam.max_theta() + 0.1),
            Err(Error::NonMonotoneDomain { .. })
        ));
    }

    #[test]
    fn non_monotone_polynomial_rejected() {
        let intr = PinholeCamera::centered(40.0, 40.0, 128, 96).unwrap();
        let err = FisheyeCamera::new(intr, PoseSE3::identity(), [-0.6, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonMonotoneDomain { .. }));
    }

    #[test]
    fn pixel_radial_distance_examples() {
        let c = PinholeCamera::new(1.0, 1.0, 0.0, 0.0, 10, 10).unwrap();
        assert_eq!(pixel_radial_distance(&c, 0.0, 0.0), 0.0);
        assert_eq!(pixel_radial_distance(&c, 3.0, 4.0), 5.0);
        let c = PinholeCamera::centered(1.0, 1.0, 11, 11).unwrap();
        assert_eq!(
            pixel_radial_distance(&c, c.cx + 2.5, c.cy),
            pixel_radial_distance(&c, c.cx - 2.5, c.cy)
        );
    }

    #[test]
    fn fisheye_ray_examples() {
        let cam = unit_fisheye([0.0; 3]);
        assert_eq!(cam.pixel_to_ray(2.0, 2.0).direction, Vector3::z());
        let d = cam.pixel_to_ray(3.0, 2.0).direction;
        assert_relative_eq!(
            d,
            Vector3::new(0.5f64.sqrt(), 0.0, 0.5f64.sqrt()),
            epsilon = 1e-15
        );
        let shifted = cam.with_pose(PoseSE3::from_translation(Vector3::new(1.0, -2.0, 0.5)));
        let r = shifted.pixel_to_ray(3.0, 4.0);
        assert_relative_eq!(
            r.direction,
            cam.pixel_to_ray(3.0, 4.0).direction,
            epsilon = 1e-15
        );
        assert_eq!(r.origin, Vector3::new(1.0, -2.0, 0.5));
    }

    #[test]
    fn fisheye_axis_point_hits_principal_point() {
        let pose = PoseSE3::new(Vector3::new(0.2, -0.1, 0.3), Vector3::new(1.0, 2.0, 3.0));
        let cam = realistic_fisheye([0.08, 0.0, 0.0], pose);
        let p = pose.transform_point(&Vector3::new(0.0, 0.0, 4.0));
        let uv = cam.project(&p).unwrap();
        assert_relative_eq!(
            uv,
            Vector2::new(cam.intrinsics.cx, cam.intrinsics.cy),
            epsilon = 1e-12
        );
    }

    #[test]
    fn zero_distortion_follows_arctan_law() {
        // Independent scalar evaluation: with k = 0 the pixel radius is f·tan θ.
        let cam = realistic_fisheye([0.0; 3], PoseSE3::identity());
        let f = cam.focal();
        for &(x, y, z) in &[(0.3, 0.1, 1.0), (-0.5, 0.7, 2.0), (0.0, -1.1, 1.5)] {
            let uv = cam.project_camera_frame(&Vector3::new(x, y, z)).unwrap();
            let rho: f64 = (x * x + y * y as f64).sqrt();
            let theta = rho.atan2(z);
            let r = f * theta.tan();
            assert_relative_eq!(uv.x, cam.intrinsics.cx + r * x / rho, epsilon = 1e-10);
            assert_relative_eq!(uv.y, cam.intrinsics.cy + r * y / rho, epsilon = 1e-10);
            let r_d = pixel_radial_distance(&cam.intrinsics, uv.x, uv.y);
            assert_eq!(cam.undistort_angle(r_d), (r_d / f).atan());
        }
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = realistic_fisheye([0.05, 0.0, 0.0], PoseSE3::identity());
        assert!(matches!(
            cam.project_camera_frame(&Vector3::new(0.1, 0.0, -1.0)),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn pinhole_examples() {
        let c = PinholeCamera::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap();
        assert_eq!(
            c.unproject(&Vector2::new(50.0, 50.0), 1.0).unwrap(),
            Vector3::z()
        );
        assert_eq!(
            c.unproject(&Vector2::new(150.0, 50.0), 2.0).unwrap(),
            Vector3::new(2.0, 0.0, 2.0)
        );
        assert!(matches!(
            c.unproject(&Vector2::new(1.0, 1.0), 0.0),
            Err(Error::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn projection_jacobians_match_finite_differences() {
        let cam = realistic_fisheye([0.08, -0.01, 0.002], PoseSE3::identity());
        let p = Vector3::new(0.4, -0.3, 1.2);
        let proj = cam.project_camera_frame_with_jacobians(&p).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut dp = Vector3::zeros();
            dp[i] = h;
            let fd = (cam.project_camera_frame(&(p + dp)).unwrap()
                - cam.project_camera_frame(&(p - dp)).unwrap())
                / (2.0 * h);
            assert!((fd - proj.d_point.column(i)).amax() < 1e-5);
            let mut kp = cam.k;
            let mut km = cam.k;
            kp[i] += h;
            km[i] -= h;
            let up = cam
                .with_distortion(kp)
                .unwrap()
                .project_camera_frame(&p)
                .unwrap();
            let um = cam
                .with_distortion(km)
                .unwrap()
                .project_camera_frame(&p)
                .unwrap();
            let fd = (up - um) / (2.0 * h);
            assert!(
                (fd - proj.d_k.column(i)).amax() < 1e-4,
                "{fd:?} vs {:?}",
                proj.d_k.column(i)
            );
        }
    }

    #[test]
    fn direction_k_jacobian_matches_finite_differences() {
        let cam = realistic_fisheye([0.08, 0.01, 0.0], PoseSE3::identity());
        let (_, jac) = cam.ray_direction_camera_with_k_jacobian(10.0, 80.0);
        let h = 1e-6;
        for i in 0..3 {
            let mut kp = cam.k;
            let mut km = cam.k;
            kp[i] += h;
            km[i] -= h;
            let fd = (cam
                .with_distortion(kp)
                .unwrap()
                .ray_direction_camera(10.0, 80.0)
                - cam
                    .with_distortion(km)
                    .unwrap()
                    .ray_direction_camera(10.0, 80.0))
                / (2.0 * h);
            assert!((fd - jac.column(i)).amax() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn distort_undistort_round_trip(k1 in -0.05..0.15f64, k2 in -0.02..0.02f64, frac in 0.0..1.0f64) {
            let cam = realistic_fisheye([k1, k2, 0.0], PoseSE3::identity());
            let r_d = frac * cam.intrinsics.corner_radius();
            let theta = cam.undistort_angle(r_d);
            let td = cam.distort_angle(theta).unwrap();
            prop_assert!((cam.theta_from_distorted(td) - theta).abs() < 1e-10);
            prop_assert!((td - (r_d / cam.focal()).atan()).abs() < 1e-10);
        }

        #[test]
        fn project_then_ray_passes_through_point(
            k1 in 0.0..0.12f64, x in -1.0..1.0f64, y in -1.0..1.0f64, z in 0.5..3.0f64,
            phi in (-0.5..0.5f64, -0.5..0.5f64, -0.5..0.5f64),
        ) {
            let pose = PoseSE3::new(Vector3::new(phi.0, phi.1, phi.2), Vector3::new(0.3, -0.2, 1.0));
            let cam = realistic_fisheye([k1, 0.0, 0.0], pose);
            let p = pose.transform_point(&Vector3::new(x, y, z));
            if let Ok(uv) = cam.project(&p) {
                let ray = cam.pixel_to_ray(uv.x, uv.y);
                prop_assert!(ray.distance_to_point(&p) < 1e-8);
            }
        }

        #[test]
        fn ray_samples_reproject_to_pixel(k1 in 0.0..0.12f64, u in 0.0..127.0f64, v in 0.0..95.0f64, s in 0.2..10.0f64) {
            let pose = PoseSE3::new(Vector3::new(0.1, 0.2, -0.3), Vector3::new(1.0, 0.0, 0.0));
            let cam = realistic_fisheye([k1, 0.0, 0.0], pose);
            let ray = cam.pixel_to_ray(u, v);
            let uv = cam.project(&ray.at(s)).unwrap();
            prop_assert!((uv - Vector2::new(u, v)).amax() < 1e-6);
        }

        #[test]
        fn pinhole_round_trip(u in 0.0..127.0f64, v in 0.0..95.0f64, d in 0.1..50.0f64) {
            let c = PinholeCamera::centered(70.0, 65.0, 128, 96).unwrap();
            let p = c.unproject(&Vector2::new(u, v), d).unwrap();
            let back = c.project(&p).unwrap();
            prop_assert!((back - Vector2::new(u, v)).amax() < 1e-10);
        }
    }
}
