//! Rigid-body geometry: axis-angle rotations, SE(3) poses and rays.
//!
//! Poses are stored as an axis-angle vector `phi` (canonical, `‖phi‖ ∈ [0, π]`)
//! plus a translation `t`, and act on points as `R(phi)·p + t`. Pose updates
//! are applied on the manifold by left-multiplying with `exp(delta)` where
//! `delta = (ω, ρ)` is a 6-vector tangent increment, rotation first.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

const SMALL_ANGLE: f64 = 1e-6;

/// Cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula.
pub fn rotation_from_axis_angle(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Inverse of [`rotation_from_axis_angle`], returning the canonical vector
/// with norm in `[0, π]`. Goes through a quaternion so it stays
/// well-conditioned near `π`.
pub fn axis_angle_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // sin(θ/2) ≈ θ/2 and w ≈ 1
        return v * (2.0 / w);
    }
    let theta = 2.0 * s.atan2(w);
    v * (theta / s)
}

/// Maps any axis-angle vector onto the equivalent one with `‖phi‖ ∈ [0, π]`.
pub fn canonicalize_axis_angle(phi: &Vector3<f64>) -> Vector3<f64> {
    let theta = phi.norm();
    if theta <= PI {
        return *phi;
    }
    let axis = phi / theta;
    let mut wrapped = theta.rem_euclid(2.0 * PI);
    if wrapped > PI {
        wrapped -= 2.0 * PI;
    }
    axis * wrapped
}

/// Left Jacobian inverse of SO(3) at `phi`.
pub fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

fn se3_v(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let (b, c) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

fn se3_v_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(omega);
    let d = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * d
}

/// Rigid transform `p ↦ R(phi)·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct PoseSE3 {
    pub phi: Vector3<f64>,
    pub t: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<[f64; 6]> for PoseSE3 {
    fn from(a: [f64; 6]) -> Self {
        Self::new(
            Vector3::new(a[0], a[1], a[2]),
            Vector3::new(a[3], a[4], a[5]),
        )
    }
}

impl From<PoseSE3> for [f64; 6] {
    fn from(p: PoseSE3) -> Self {
        p.to_array()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            phi: Vector3::zeros(),
            t: Vector3::zeros(),
        }
    }

    /// Builds a pose, canonicalizing the rotation vector.
    pub fn new(phi: Vector3<f64>, t: Vector3<f64>) -> Self {
        Self {
            phi: canonicalize_axis_angle(&phi),
            t,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Vector3::zeros(), t)
    }

    pub fn from_rotation_translation(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        Self {
            phi: axis_angle_from_rotation(r),
            t,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.phi.x, self.phi.y, self.phi.z, self.t.x, self.t.y, self.t.z,
        ]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_axis_angle(&self.phi)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.t);
        m
    }

    pub fn canonicalize(&self) -> Self {
        Self::new(self.phi, self.t)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.t
    }

    /// Rotation only; directions are not translated.
    pub fn transform_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * d
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let ra = self.rotation();
        let r = ra * other.rotation();
        PoseSE3::from_rotation_translation(&r, ra * other.t + self.t)
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation().transpose();
        PoseSE3 {
            phi: -self.phi,
            t: -(rt * self.t),
        }
        .canonicalize()
    }

    /// SE(3) exponential of a tangent vector `(ω, ρ)`.
    pub fn exp(delta: &Vector6<f64>) -> PoseSE3 {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let rho = Vector3::new(delta[3], delta[4], delta[5]);
        PoseSE3::new(omega, se3_v(&omega) * rho)
    }

    /// SE(3) logarithm, inverse of [`PoseSE3::exp`] for rotations below `π`.
    pub fn log(&self) -> Vector6<f64> {
        let rho = se3_v_inverse(&self.phi) * self.t;
        Vector6::new(self.phi.x, self.phi.y, self.phi.z, rho.x, rho.y, rho.z)
    }

    /// Left retraction `exp(delta) ∘ self`.
    pub fn retract(&self, delta: &Vector6<f64>) -> PoseSE3 {
        PoseSE3::exp(delta).compose(self)
    }

    /// Tangent vector `delta` with `self.retract(delta) == other`.
    pub fn local(&self, other: &PoseSE3) -> Vector6<f64> {
        other.compose(&self.inverse()).log()
    }

    /// Jacobian of the coordinates `(phi, t)` of `self.retract(delta)` with
    /// respect to `delta`, evaluated at `delta = 0`.
    pub fn coordinate_jacobian(&self) -> Matrix6<f64> {
        let mut j = Matrix6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&so3_left_jacobian_inverse(&self.phi));
        j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-skew(&self.t)));
        j.fixed_view_mut::<3, 3>(3, 3)
            .copy_from(&Matrix3::identity());
        j
    }

    /// Camera center when the pose maps camera to world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        self.t
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_distance_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    axis_angle_from_rotation(&(a.transpose() * b))
        .norm()
        .to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }

    /// Perpendicular distance from `p` to the (infinite) ray line.
    pub fn distance_to_point(&self, p: &Vector3<f64>) -> f64 {
        let v = p - self.origin;
        (v - self.direction * v.dot(&self.direction)).norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    fn pose() -> impl Strategy<Value = PoseSE3> {
        (vec3(), vec3()).prop_map(|(phi, t)| PoseSE3::new(phi, t))
    }

    /// Homogeneous 4×4 matrix built directly from Rodrigues, the oracle for
    /// composition.
    fn homogeneous(p: &PoseSE3) -> Matrix4<f64> {
        p.to_matrix()
    }

    #[test]
    fn zero_rotation_is_identity() {
        assert_eq!(
            rotation_from_axis_angle(&Vector3::zeros()),
            Matrix3::identity()
        );
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rotation_from_axis_angle(&Vector3::new(0.0, 0.0, PI / 2.0));
        let x = r * Vector3::x();
        assert_relative_eq!(x, Vector3::y(), epsilon = 1e-15);
    }

    #[test]
    fn transform_point_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(PoseSE3::identity().transform_point(&p), p);
        let tr = PoseSE3::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(tr.transform_point(&Vector3::zeros()), Vector3::x());
        let pose = PoseSE3::new(
            Vector3::new(0.0, 0.0, PI / 2.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        assert_relative_eq!(
            pose.transform_point(&Vector3::x()),
            Vector3::new(0.0, 1.0, 1.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn retract_examples() {
        let p = PoseSE3::new(Vector3::new(0.3, -0.2, 0.1), Vector3::new(1.0, 2.0, 3.0));
        let r = p.retract(&Vector6::zeros());
        assert_relative_eq!(r.phi, p.phi, epsilon = 1e-15);
        assert_eq!(r.t, p.t);
        let q = PoseSE3::identity().retract(&Vector6::new(0.0, 0.0, 0.0, 1.0, 0.0, 0.0));
        assert_relative_eq!(q.t, Vector3::x(), epsilon = 1e-15);
        assert_relative_eq!(q.phi, Vector3::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn retract_local_finite_difference_limit() {
        let p = PoseSE3::new(Vector3::new(0.4, 0.1, -0.7), Vector3::new(-1.0, 0.5, 2.0));
        for eps in [1e-3, 1e-5] {
            for i in 0..6 {
                let mut d = Vector6::zeros();
                d[i] = eps;
                let back = p.local(&p.retract(&d)) / eps;
                let mut e = Vector6::zeros();
                e[i] = 1.0;
                assert!((back - e).amax() < 10.0 * eps + 1e-9, "{back:?}");
            }
        }
    }

    #[test]
    fn log_near_pi_stays_canonical() {
        let axis = Vector3::new(1.0, 2.0, -0.5).normalize();
        for theta in [PI - 1e-9, PI, PI + 0.3, 2.5 * PI] {
            let phi = axis * theta;
            let c = canonicalize_axis_angle(&phi);
            assert!(c.norm() <= PI + 1e-12);
            let r1 = rotation_from_axis_angle(&phi);
            let r2 = rotation_from_axis_angle(&c);
            assert!((r1 - r2).amax() < 1e-12);
            let back = axis_angle_from_rotation(&r1);
            assert!((rotation_from_axis_angle(&back) - r1).amax() < 1e-12);
        }
    }

    #[test]
    fn coordinate_jacobian_matches_finite_differences() {
        let p = PoseSE3::new(Vector3::new(0.9, -0.4, 1.3), Vector3::new(0.7, -2.0, 1.1));
        let j = p.coordinate_jacobian();
        let h = 1e-6;
        for i in 0..6 {
            let mut d = Vector6::zeros();
            d[i] = h;
            let plus = p.retract(&d).to_array();
            d[i] = -h;
            let minus = p.retract(&d).to_array();
            for r in 0..6 {
                let fd = (plus[r] - minus[r]) / (2.0 * h);
                assert!(
                    (fd - j[(r, i)]).abs() < 1e-7,
                    "row {r} col {i}: {fd} vs {}",
                    j[(r, i)]
                );
            }
        }
    }

    #[test]
    fn pose_json_is_flat_array() {
        let p = PoseSE3::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(4.0, 5.0, 6.0));
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[0.1,0.2,0.3,4.0,5.0,6.0]");
        let back: PoseSE3 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(phi in vec3()) {
            let r = rotation_from_axis_angle(&phi);
            prop_assert!((r * r.transpose() - Matrix3::identity()).amax() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
            let back = rotation_from_axis_angle(&-phi);
            prop_assert!((r * back - Matrix3::identity()).amax() < 1e-12);
        }

        #[test]
        fn compose_matches_matrix_product(a in pose(), b in pose(), p in vec3()) {
            let c = a.compose(&b);
            let oracle = homogeneous(&a) * homogeneous(&b);
            prop_assert!((homogeneous(&c) - oracle).amax() < 1e-10);
            let via = a.transform_point(&b.transform_point(&p));
            prop_assert!((c.transform_point(&p) - via).amax() < 1e-10);
        }

        #[test]
        fn compose_with_inverse_is_identity(a in pose()) {
            let id = a.compose(&a.inverse());
            prop_assert!(id.phi.amax() < 1e-10 && id.t.amax() < 1e-10);
            let same = a.compose(&PoseSE3::identity());
            prop_assert!((same.phi - a.phi).amax() < 1e-10 && (same.t - a.t).amax() < 1e-10);
        }

        #[test]
        fn composition_is_associative(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b).compose(&c).to_matrix();
            let r = a.compose(&b.compose(&c)).to_matrix();
            prop_assert!((l - r).amax() < 1e-10);
        }

        #[test]
        fn canonicalize_is_idempotent(phi in (-12.0..12.0f64, -12.0..12.0f64, -12.0..12.0f64)) {
            let v = Vector3::new(phi.0, phi.1, phi.2);
            let once = canonicalize_axis_angle(&v);
            prop_assert!(once.norm() <= PI + 1e-12);
            prop_assert_eq!(canonicalize_axis_angle(&once), once);
        }

        #[test]
        fn retract_and_local_are_inverse(p in pose(), d in (vec3(), vec3())) {
            let omega = d.0 * (2.5 / 3.0 / 3f64.sqrt());
            let delta = Vector6::new(omega.x, omega.y, omega.z, d.1.x, d.1.y, d.1.z);
            let back = p.local(&p.retract(&delta));
            prop_assert!((back - delta).amax() < 1e-8, "{:?} vs {:?}", back, delta);
        }
    }
}
