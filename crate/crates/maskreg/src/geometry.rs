//! Ray-coordinate conversions, their Jacobians, and SE(3) arithmetic.
//!
//! Ray coordinates (w, h, r) = (x/z, y/z, ||p||) are the native error space
//! of the depth sensor: (w, h) index a direction on a virtual image plane at
//! focal length 1, and r is the Euclidean range along that direction.

use nalgebra::{Matrix3, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point has non-positive depth z = {0}")]
    NonPositiveDepth(f64),
    #[error("ray point has non-positive range r = {0}")]
    NonPositiveRange(f64),
    #[error("rotation angle {0} rad is outside the log domain (< pi)")]
    AngleOutOfDomain(f64),
    #[error("singular Jacobian, cannot invert")]
    SingularJacobian,
}

/// 3D point in the camera frame, z forward along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_vec(v: Vec3) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

/// Observation in ray coordinates: image-plane direction (w, h) plus range r.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPoint {
    pub w: f64,
    pub h: f64,
    pub r: f64,
}

impl RayPoint {
    pub fn new(w: f64, h: f64, r: f64) -> Self {
        Self { w, h, r }
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.w, self.h, self.r)
    }
}

/// w = x/z, h = y/z, r = ||p||. Requires z > 0.
pub fn to_ray(p: CartesianPoint) -> Result<RayPoint, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(RayPoint {
        w: p.x / p.z,
        h: p.y / p.z,
        r: (p.x * p.x + p.y * p.y + p.z * p.z).sqrt(),
    })
}

/// Inverse of [`to_ray`]. Requires r > 0.
pub fn from_ray(q: RayPoint) -> Result<CartesianPoint, GeometryError> {
    if q.r <= 0.0 {
        return Err(GeometryError::NonPositiveRange(q.r));
    }
    let z = q.r / (1.0 + q.w * q.w + q.h * q.h).sqrt();
    Ok(CartesianPoint { x: q.w * z, y: q.h * z, z })
}

/// Closed-form 3x3 Jacobian of the Cartesian-to-ray map at `p`:
/// rows are d(w,h,r)/d(x,y,z).
pub fn ray_jacobian(p: CartesianPoint) -> Result<Mat3, GeometryError> {
    if p.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    let r = p.vec().norm();
    let z2 = p.z * p.z;
    Ok(Mat3::new(
        1.0 / p.z, 0.0, -p.x / z2,
        0.0, 1.0 / p.z, -p.y / z2,
        p.x / r, p.y / r, p.z / r,
    ))
}

/// Rigid transform on SE(3): x -> R x + t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Rotation by `angle` about unit `axis`, no translation.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        Self { rotation: so3_exp(axis * angle), translation: Vec3::zeros() }
    }

    pub fn transform(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// self ∘ other: apply `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Geodesic rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let c = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }
}

fn hat(v: Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula with a Taylor branch for small angles.
pub fn so3_exp(omega: Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = hat(omega);
    if theta < 1e-8 {
        Mat3::identity() + k + k * k * 0.5
    } else {
        let t2 = theta * theta;
        Mat3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / t2)
    }
}

pub fn so3_log(r: &Mat3) -> Result<Vec3, GeometryError> {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = c.acos();
    if theta >= std::f64::consts::PI - 1e-7 {
        return Err(GeometryError::AngleOutOfDomain(theta));
    }
    let skew = (r - r.transpose()) * 0.5;
    if theta < 1e-8 {
        // log(R) ~ (R - R^T)/2 to first order
        Ok(vee(&skew))
    } else {
        Ok(vee(&skew) * (theta / theta.sin()))
    }
}

fn se3_v(omega: Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = hat(omega);
    if theta < 1e-6 {
        Mat3::identity() + k * 0.5 + k * k * (1.0 / 6.0)
    } else {
        let t2 = theta * theta;
        Mat3::identity()
            + k * ((1.0 - theta.cos()) / t2)
            + k * k * ((theta - theta.sin()) / (t2 * theta))
    }
}

fn se3_v_inv(omega: Vec3) -> Mat3 {
    let theta = omega.norm();
    let k = hat(omega);
    if theta < 1e-6 {
        Mat3::identity() - k * 0.5 + k * k * (1.0 / 12.0)
    } else {
        let t2 = theta * theta;
        let coef = (1.0 - theta * (1.0 + theta.cos()) / (2.0 * theta.sin())) / t2;
        Mat3::identity() - k * 0.5 + k * k * coef
    }
}

/// SE(3) exponential; tangent layout is (rotation vector, translation).
pub fn exp6(v: Vec6) -> RigidTransform {
    let omega = Vec3::new(v[0], v[1], v[2]);
    let rho = Vec3::new(v[3], v[4], v[5]);
    RigidTransform { rotation: so3_exp(omega), translation: se3_v(omega) * rho }
}

/// SE(3) logarithm; requires rotation angle < pi.
pub fn log6(t: &RigidTransform) -> Result<Vec6, GeometryError> {
    let omega = so3_log(&t.rotation)?;
    let rho = se3_v_inv(omega) * t.translation;
    Ok(Vec6::new(omega.x, omega.y, omega.z, rho.x, rho.y, rho.z))
}

/// Linearization of the cross-image ray-coordinate map around observed point `b`
/// (ray coordinates of the image the point was seen in). `t` maps the other
/// image's frame into b's frame, so the anchor is t^-1 applied to b.
///
/// Returns the anchor (b expressed in the other frame, ray coordinates) and
/// M = Q_b R Q_anchor^-1, the 3x3 matrix such that a point s near the anchor
/// maps to approximately b + M (s - anchor).
pub fn linearized_cross_transform(
    b: RayPoint,
    t: &RigidTransform,
) -> Result<(RayPoint, Mat3), GeometryError> {
    let b_cart = from_ray(b)?;
    let anchor_cart = CartesianPoint::from_vec(t.inverse().transform(b_cart.vec()));
    if anchor_cart.z <= 0.0 {
        return Err(GeometryError::NonPositiveDepth(anchor_cart.z));
    }
    let q_anchor = ray_jacobian(anchor_cart)?;
    let q_b = ray_jacobian(b_cart)?;
    let q_anchor_inv = q_anchor.try_inverse().ok_or(GeometryError::SingularJacobian)?;
    let m = q_b * t.rotation * q_anchor_inv;
    Ok((to_ray(anchor_cart)?, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut impl Rng, max_angle: f64, max_trans: f64) -> RigidTransform {
        let axis = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            .normalize();
        let angle = rng.gen::<f64>() * max_angle;
        let t = Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            * 2.0
            * max_trans;
        RigidTransform { rotation: so3_exp(axis * angle), translation: t }
    }

    #[test]
    fn to_ray_known_values() {
        let q = to_ray(CartesianPoint::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((q.w, q.h, q.r), (0.0, 0.0, 1.0));

        let q = to_ray(CartesianPoint::new(1.0, 1.0, 1.0)).unwrap();
        assert!((q.w - 1.0).abs() < 1e-15);
        assert!((q.h - 1.0).abs() < 1e-15);
        assert!((q.r - 3.0f64.sqrt()).abs() < 1e-15);

        let q = to_ray(CartesianPoint::new(0.2, -0.1, 2.0)).unwrap();
        assert!((q.w - 0.1).abs() < 1e-15);
        assert!((q.h + 0.05).abs() < 1e-15);
        assert!((q.r - (0.2f64 * 0.2 + 0.01 + 4.0).sqrt()).abs() < 1e-15);
        assert!((q.r - 2.01246).abs() < 1e-5);
    }

    #[test]
    fn to_ray_rejects_nonpositive_z() {
        assert!(to_ray(CartesianPoint::new(0.1, 0.1, 0.0)).is_err());
        assert!(to_ray(CartesianPoint::new(0.1, 0.1, -1.0)).is_err());
    }

    #[test]
    fn from_ray_known_values() {
        let p = from_ray(RayPoint::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 1.0));
        let p = from_ray(RayPoint::new(1.0, 1.0, 3.0f64.sqrt())).unwrap();
        assert!((p.x - 1.0).abs() < 1e-12);
        assert!((p.y - 1.0).abs() < 1e-12);
        assert!((p.z - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ray_round_trip(x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.1f64..10.0) {
            let p = CartesianPoint::new(x, y, z);
            let q = to_ray(p).unwrap();
            let p2 = from_ray(q).unwrap();
            let scale = p.vec().norm().max(1.0);
            prop_assert!((p.vec() - p2.vec()).norm() / scale < 1e-12);
        }

        #[test]
        fn exp_log_round_trip(
            wx in -1.0f64..1.0, wy in -1.0f64..1.0, wz in -1.0f64..1.0,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
        ) {
            let v = Vec6::new(wx, wy, wz, tx, ty, tz);
            let back = log6(&exp6(v)).unwrap();
            prop_assert!((v - back).norm() < 1e-9);
        }
    }

    #[test]
    fn ray_jacobian_known_values() {
        let j = ray_jacobian(CartesianPoint::new(0.0, 0.0, 1.0)).unwrap();
        assert!((j - Mat3::identity()).norm() < 1e-15);

        let j = ray_jacobian(CartesianPoint::new(0.0, 0.0, 2.0)).unwrap();
        let expected = Mat3::new(0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0);
        assert!((j - expected).norm() < 1e-15);
    }

    #[test]
    fn ray_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-6;
        for _ in 0..1000 {
            let p = CartesianPoint::new(
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
                0.3 + rng.gen::<f64>() * 4.7,
            );
            let j = ray_jacobian(p).unwrap();
            let mut fd = Mat3::zeros();
            for axis in 0..3 {
                let mut dp = Vec3::zeros();
                dp[axis] = step;
                let hi = to_ray(CartesianPoint::from_vec(p.vec() + dp)).unwrap().vec();
                let lo = to_ray(CartesianPoint::from_vec(p.vec() - dp)).unwrap().vec();
                fd.set_column(axis, &((hi - lo) / (2.0 * step)));
            }
            let rel = (j - fd).norm() / j.norm();
            assert!(rel < 1e-6, "rel err {} at {:?}", rel, p);
        }
    }

    #[test]
    fn cross_transform_identity_on_axis() {
        let b = RayPoint::new(0.0, 0.0, 1.5);
        let (anchor, m) = linearized_cross_transform(b, &RigidTransform::identity()).unwrap();
        assert!((anchor.vec() - b.vec()).norm() < 1e-12);
        assert!((m - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn cross_transform_second_order_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut orders = Vec::new();
        for _ in 0..50 {
            let t = random_transform(&mut rng, 0.5, 0.1);
            let b_cart = CartesianPoint::new(
                rng.gen::<f64>() * 0.4 - 0.2,
                rng.gen::<f64>() * 0.4 - 0.2,
                0.8 + rng.gen::<f64>(),
            );
            let b = to_ray(b_cart).unwrap();
            let Ok((anchor, m)) = linearized_cross_transform(b, &t) else { continue };

            let residual = |delta: f64| -> f64 {
                let s = RayPoint::new(anchor.w + delta, anchor.h - delta * 0.5, anchor.r + delta);
                // exact: convert to cartesian in the anchor frame, push through t
                let exact =
                    to_ray(CartesianPoint::from_vec(t.transform(from_ray(s).unwrap().vec())))
                        .unwrap();
                let approx = b.vec() + m * (s.vec() - anchor.vec());
                (exact.vec() - approx).norm()
            };

            let d1 = 1e-4;
            let r1 = residual(d1);
            let r2 = residual(d1 / 2.0);
            assert!(r1 < 1e-6, "linearization residual too large: {}", r1);
            if r1 > 1e-13 && r2 > 1e-14 {
                orders.push((r1 / r2).log2());
            }
        }
        let mean_order = orders.iter().sum::<f64>() / orders.len() as f64;
        assert!(mean_order >= 1.9, "observed order {}", mean_order);
    }

    #[test]
    fn se3_group_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_transform(&mut rng, 2.0, 1.0);
            let b = random_transform(&mut rng, 2.0, 1.0);
            let c = random_transform(&mut rng, 2.0, 1.0);

            let ab_c = a.compose(&b).compose(&c);
            let a_bc = a.compose(&b.compose(&c));
            assert!((ab_c.rotation - a_bc.rotation).norm() < 1e-10);
            assert!((ab_c.translation - a_bc.translation).norm() < 1e-10);

            let id = a.compose(&a.inverse());
            assert!((id.rotation - Mat3::identity()).norm() < 1e-10);
            assert!(id.translation.norm() < 1e-10);
        }
    }

    #[test]
    fn exp6_zero_is_identity() {
        let t = exp6(Vec6::zeros());
        assert_eq!(t.rotation, Mat3::identity());
        assert_eq!(t.translation, Vec3::zeros());
    }

    #[test]
    fn log6_rejects_pi_rotation() {
        let t = RigidTransform::from_axis_angle(Vec3::x(), std::f64::consts::PI);
        assert!(log6(&t).is_err());
    }
}
