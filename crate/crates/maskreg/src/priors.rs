//! Proposal distributions over SE(3) encoding nonvisual information about the
//! object's motion. Samples drawn here are weighted by the mask likelihood;
//! because the proposal is the prior itself, the weights need no density ratio.

use crate::geometry::{exp6, from_ray, log6, so3_exp, Mat3, RayPoint, RigidTransform, Vec3, Vec6};
use nalgebra::Matrix6;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("prior requires non-empty point clouds for centroid alignment")]
    EmptyCloud,
    #[error("plane normal must be non-zero")]
    DegenerateNormal,
    #[error("covariance is not symmetric positive definite")]
    BadCovariance,
    #[error("prior bounds must be non-negative")]
    BadBounds,
}

/// Declarative prior description; serializable as part of a run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSpec {
    /// Uniform over rotations up to a bound and centroid shifts inside a ball.
    Bounded6Dof { max_translation_m: f64, max_rotation_deg: f64 },
    /// Translations and rotations in the plane of a table.
    Planar {
        plane_point: [f64; 3],
        plane_normal: [f64; 3],
        translation_bound_m: f64,
        yaw_bound_deg: f64,
    },
    /// Gaussian in tangent coordinates around a mean transform.
    Gaussian { mean_tangent: [f64; 6], covariance: Vec<f64> },
}

enum PriorKind {
    Bounded6Dof {
        max_translation: f64,
        max_rotation: f64,
    },
    Planar {
        normal: Vec3,
        basis: (Vec3, Vec3),
        translation_bound: f64,
        yaw_bound: f64,
    },
    Gaussian {
        mean_tangent: Vec6,
        chol: Matrix6<f64>,
        covariance: Matrix6<f64>,
    },
}

/// A prior bound to a pair of clouds (for centroid alignment), ready to sample.
pub struct Prior {
    kind: PriorKind,
    centroid_a: Vec3,
    centroid_b: Vec3,
}

fn centroid(cloud: &[RayPoint]) -> Result<Vec3, PriorError> {
    if cloud.is_empty() {
        return Err(PriorError::EmptyCloud);
    }
    let mut sum = Vec3::zeros();
    for &p in cloud {
        sum += from_ray(p).map_err(|_| PriorError::EmptyCloud)?.vec();
    }
    Ok(sum / cloud.len() as f64)
}

/// Any unit vector orthogonal to `n`.
fn orthonormal_basis(n: Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

impl Prior {
    /// Binds `spec` to the clouds of the two images being registered.
    /// `cloud_a` and `cloud_b` are only used for centroid alignment and may be
    /// empty for the Gaussian variant.
    pub fn new(
        spec: &PriorSpec,
        cloud_a: &[RayPoint],
        cloud_b: &[RayPoint],
    ) -> Result<Self, PriorError> {
        let kind = match spec {
            PriorSpec::Bounded6Dof { max_translation_m, max_rotation_deg } => {
                if *max_translation_m < 0.0 || *max_rotation_deg < 0.0 {
                    return Err(PriorError::BadBounds);
                }
                PriorKind::Bounded6Dof {
                    max_translation: *max_translation_m,
                    max_rotation: max_rotation_deg.to_radians(),
                }
            }
            PriorSpec::Planar { plane_normal, translation_bound_m, yaw_bound_deg, .. } => {
                if *translation_bound_m < 0.0 || *yaw_bound_deg < 0.0 {
                    return Err(PriorError::BadBounds);
                }
                let n = Vec3::new(plane_normal[0], plane_normal[1], plane_normal[2]);
                if n.norm() < 1e-12 {
                    return Err(PriorError::DegenerateNormal);
                }
                let n = n.normalize();
                PriorKind::Planar {
                    normal: n,
                    basis: orthonormal_basis(n),
                    translation_bound: *translation_bound_m,
                    yaw_bound: yaw_bound_deg.to_radians(),
                }
            }
            PriorSpec::Gaussian { mean_tangent, covariance } => {
                if covariance.len() != 36 {
                    return Err(PriorError::BadCovariance);
                }
                let cov = Matrix6::from_row_slice(covariance);
                if (cov - cov.transpose()).norm() > 1e-9 * cov.norm().max(1e-300) {
                    return Err(PriorError::BadCovariance);
                }
                let chol = cov.cholesky().ok_or(PriorError::BadCovariance)?;
                PriorKind::Gaussian {
                    mean_tangent: Vec6::from_row_slice(mean_tangent),
                    chol: chol.l(),
                    covariance: cov,
                }
            }
        };
        let needs_centroids = !matches!(kind, PriorKind::Gaussian { .. });
        let (ca, cb) = if needs_centroids {
            (centroid(cloud_a)?, centroid(cloud_b)?)
        } else {
            (Vec3::zeros(), Vec3::zeros())
        };
        Ok(Self { kind, centroid_a: ca, centroid_b: cb })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RigidTransform {
        match &self.kind {
            PriorKind::Bounded6Dof { max_translation, max_rotation } => {
                let rotation = if *max_rotation > 0.0 {
                    let axis: [f64; 3] = rng.sample(rand_distr::UnitSphere);
                    let angle = rng.gen::<f64>() * max_rotation;
                    so3_exp(Vec3::new(axis[0], axis[1], axis[2]) * angle)
                } else {
                    Mat3::identity()
                };
                let shift = if *max_translation > 0.0 {
                    let dir: [f64; 3] = rng.sample(rand_distr::UnitBall);
                    Vec3::new(dir[0], dir[1], dir[2]) * *max_translation
                } else {
                    Vec3::zeros()
                };
                let translation = self.centroid_b - rotation * self.centroid_a + shift;
                RigidTransform::new(rotation, translation)
            }
            PriorKind::Planar { normal, basis, translation_bound, yaw_bound } => {
                let yaw = if *yaw_bound > 0.0 {
                    (rng.gen::<f64>() * 2.0 - 1.0) * yaw_bound
                } else {
                    0.0
                };
                let rotation = so3_exp(normal * yaw);
                let shift0 = self.centroid_b - rotation * self.centroid_a;
                let in_plane = shift0 - normal * normal.dot(&shift0);
                let extra = if *translation_bound > 0.0 {
                    let rad = translation_bound * rng.gen::<f64>().sqrt();
                    let ang = rng.gen::<f64>() * std::f64::consts::TAU;
                    basis.0 * (rad * ang.cos()) + basis.1 * (rad * ang.sin())
                } else {
                    Vec3::zeros()
                };
                RigidTransform::new(rotation, in_plane + extra)
            }
            PriorKind::Gaussian { mean_tangent, chol, .. } => {
                let mut z = Vec6::zeros();
                for i in 0..6 {
                    z[i] = rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
                exp6(mean_tangent + chol * z)
            }
        }
    }

    /// True iff `t` lies in (or within numerical tolerance of) the support.
    pub fn support_check(&self, t: &RigidTransform) -> bool {
        const TOL: f64 = 1e-9;
        match &self.kind {
            PriorKind::Bounded6Dof { max_translation, max_rotation } => {
                let shift =
                    (t.translation - (self.centroid_b - t.rotation * self.centroid_a)).norm();
                t.rotation_angle() <= max_rotation + TOL && shift <= max_translation + TOL
            }
            PriorKind::Planar { normal, translation_bound, yaw_bound, .. } => {
                if (t.rotation * normal - normal).norm() > 1e-6 {
                    return false;
                }
                if t.translation.dot(normal).abs() > 1e-6 {
                    return false;
                }
                if t.rotation_angle() > yaw_bound + 1e-6 {
                    return false;
                }
                let shift0 = self.centroid_b - t.rotation * self.centroid_a;
                let in_plane = shift0 - normal * normal.dot(&shift0);
                (t.translation - in_plane).norm() <= translation_bound + 1e-6
            }
            PriorKind::Gaussian { .. } => log6(t).is_ok(),
        }
    }

    /// Tangent-space covariance of the Gaussian variant, if any.
    pub fn gaussian_covariance(&self) -> Option<&Matrix6<f64>> {
        match &self.kind {
            PriorKind::Gaussian { covariance, .. } => Some(covariance),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clouds() -> (Vec<RayPoint>, Vec<RayPoint>) {
        let a = vec![
            RayPoint::new(0.0, 0.0, 1.0),
            RayPoint::new(0.1, 0.0, 1.1),
            RayPoint::new(-0.1, 0.05, 0.9),
        ];
        let b = vec![
            RayPoint::new(0.02, 0.0, 1.05),
            RayPoint::new(0.12, 0.01, 1.12),
            RayPoint::new(-0.08, 0.06, 0.93),
        ];
        (a, b)
    }

    #[test]
    fn degenerate_bounded_prior_is_exact_centroid_alignment() {
        let (a, b) = clouds();
        let spec = PriorSpec::Bounded6Dof { max_translation_m: 0.0, max_rotation_deg: 0.0 };
        let prior = Prior::new(&spec, &a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = prior.sample(&mut rng);
        assert_eq!(t.rotation, Mat3::identity());
        let ca = centroid(&a).unwrap();
        let cb = centroid(&b).unwrap();
        assert!((t.translation - (cb - ca)).norm() < 1e-12);
    }

    #[test]
    fn bounded_samples_respect_paper_bounds() {
        let (a, b) = clouds();
        let spec = PriorSpec::Bounded6Dof { max_translation_m: 0.04, max_rotation_deg: 50.0 };
        let prior = Prior::new(&spec, &a, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca = centroid(&a).unwrap();
        let cb = centroid(&b).unwrap();
        let mut max_shift: f64 = 0.0;
        let mut max_angle: f64 = 0.0;
        for _ in 0..100_000 {
            let t = prior.sample(&mut rng);
            assert!(prior.support_check(&t));
            max_shift = max_shift.max((t.rotation * ca + t.translation - cb).norm());
            max_angle = max_angle.max(t.rotation_angle());
        }
        assert!(max_shift <= 0.04 + 1e-12);
        assert!(max_angle <= 50.0f64.to_radians() + 1e-12);
        // the bounds should actually be exercised
        assert!(max_shift > 0.035);
        assert!(max_angle > 45.0f64.to_radians());
    }

    #[test]
    fn planar_samples_preserve_the_plane() {
        let (a, b) = clouds();
        let spec = PriorSpec::Planar {
            plane_point: [0.0, 0.2, 1.0],
            plane_normal: [0.1, -1.0, 0.2],
            translation_bound_m: 0.05,
            yaw_bound_deg: 60.0,
        };
        let prior = Prior::new(&spec, &a, &b).unwrap();
        let n = Vec3::new(0.1, -1.0, 0.2).normalize();
        let p0 = Vec3::new(0.0, 0.2, 1.0);
        let (e1, e2) = orthonormal_basis(n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let t = prior.sample(&mut rng);
            assert!(prior.support_check(&t));
            assert!((n.dot(&(t.rotation * n)) - 1.0).abs() < 1e-10);
            assert!(t.translation.dot(&n).abs() < 1e-10);
            // in-plane test points stay on the plane
            for q in [p0, p0 + e1 * 0.3, p0 - e2 * 0.2] {
                let dist = n.dot(&(t.transform(q) - p0)).abs();
                assert!(dist < 1e-9);
            }
        }
    }

    #[test]
    fn gaussian_prior_concentrates_at_its_mean() {
        let mean = [0.01, -0.02, 0.03, 0.001, 0.002, -0.003];
        let mut cov = vec![0.0; 36];
        for i in 0..6 {
            cov[i * 7] = 1e-12;
        }
        let spec = PriorSpec::Gaussian { mean_tangent: mean, covariance: cov };
        let prior = Prior::new(&spec, &[], &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = prior.sample(&mut rng);
        let tangent = log6(&t).unwrap();
        assert!((tangent - Vec6::from_row_slice(&mean)).norm() < 1e-4);
    }

    #[test]
    fn support_check_rejects_out_of_bound_rotation() {
        let (a, b) = clouds();
        let spec = PriorSpec::Bounded6Dof { max_translation_m: 0.04, max_rotation_deg: 50.0 };
        let prior = Prior::new(&spec, &a, &b).unwrap();
        let t90 = RigidTransform::from_axis_angle(Vec3::y(), 90f64.to_radians());
        assert!(!prior.support_check(&t90));

        // boundary angle with exact centroid alignment is inside (closed support)
        let r = so3_exp(Vec3::y() * 50f64.to_radians());
        let ca = centroid(&a).unwrap();
        let cb = centroid(&b).unwrap();
        let t = RigidTransform::new(r, cb - r * ca);
        assert!(prior.support_check(&t));
    }

    #[test]
    fn fixed_seed_gives_identical_streams() {
        let (a, b) = clouds();
        let spec = PriorSpec::Bounded6Dof { max_translation_m: 0.04, max_rotation_deg: 50.0 };
        let prior = Prior::new(&spec, &a, &b).unwrap();
        let s1: Vec<_> =
            (0..50).map(|_| prior.sample(&mut ChaCha8Rng::seed_from_u64(9))).collect();
        let s2: Vec<_> =
            (0..50).map(|_| prior.sample(&mut ChaCha8Rng::seed_from_u64(9))).collect();
        for (x, y) in s1.iter().zip(&s2) {
            assert_eq!(x.rotation, y.rotation);
            assert_eq!(x.translation, y.translation);
        }
    }
}
