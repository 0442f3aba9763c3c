//! Point-to-point ICP baseline: nearest-neighbor correspondences through a
//! k-d tree, distance-gated, with a closed-form Kabsch fit per iteration.

use crate::geometry::{from_ray, Mat3, RayPoint, RigidTransform, Vec3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IcpError {
    #[error("need at least 3 non-collinear points per cloud")]
    DegenerateCloud,
    #[error("no correspondences within the gating distance")]
    NoCorrespondences,
    #[error("SVD failed on the correspondence cross-covariance")]
    SvdFailed,
}

#[derive(Debug, Clone)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop when the RMS change between iterations falls below this.
    pub tol: f64,
    /// Correspondences farther than this are discarded.
    pub max_corr_dist: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self { max_iter: 60, tol: 1e-10, max_corr_dist: 0.10 }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Transform mapping cloud A into cloud B's frame.
    pub transform: RigidTransform,
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimal 3D k-d tree over a fixed point set.
struct KdTree {
    points: Vec<Vec3>,
    // node i splits `order[range]` at its median along axis (depth % 3)
    order: Vec<usize>,
}

impl KdTree {
    fn build(points: Vec<Vec3>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let len = order.len();
        Self::split(&points, &mut order, 0, len, 0);
        Self { points, order }
    }

    fn split(points: &[Vec3], order: &mut [usize], lo: usize, hi: usize, axis: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mid = (lo + hi) / 2;
        order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap()
        });
        Self::split(points, order, lo, mid, (axis + 1) % 3);
        Self::split(points, order, mid + 1, hi, (axis + 1) % 3);
    }

    fn nearest(&self, query: Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(query, 0, self.order.len(), 0, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn search(&self, query: Vec3, lo: usize, hi: usize, axis: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let d2 = (self.points[idx] - query).norm_squared();
        if d2 < best.1 {
            *best = (idx, d2);
        }
        let diff = query[axis] - self.points[idx][axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(query, near.0, near.1, (axis + 1) % 3, best);
        if diff * diff < best.1 {
            self.search(query, far.0, far.1, (axis + 1) % 3, best);
        }
    }
}

/// Least-squares rigid fit mapping `src` onto `dst` (paired), by SVD of the
/// cross-covariance.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, IcpError> {
    assert_eq!(src.len(), dst.len());
    let n = src.len() as f64;
    if src.len() < 3 {
        return Err(IcpError::DegenerateCloud);
    }
    let cs: Vec3 = src.iter().sum::<Vec3>() / n;
    let cd: Vec3 = dst.iter().sum::<Vec3>() / n;
    let mut cross = Mat3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cross += (d - cd) * (s - cs).transpose();
    }
    let svd = cross.svd(true, true);
    let (u, v_t) = (svd.u.ok_or(IcpError::SvdFailed)?, svd.v_t.ok_or(IcpError::SvdFailed)?);
    if svd.singular_values[1] < 1e-15 {
        return Err(IcpError::DegenerateCloud);
    }
    let det = (u * v_t).determinant();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det.signum()));
    let rotation = u * fix * v_t;
    Ok(RigidTransform::new(rotation, cd - rotation * cs))
}

fn to_cartesian(cloud: &[RayPoint]) -> Vec<Vec3> {
    cloud.iter().filter_map(|&p| from_ray(p).ok().map(|c| c.vec())).collect()
}

/// Aligns cloud A onto cloud B starting from `init`.
pub fn icp(
    cloud_a: &[RayPoint],
    cloud_b: &[RayPoint],
    init: &RigidTransform,
    config: &IcpConfig,
) -> Result<IcpResult, IcpError> {
    let src = to_cartesian(cloud_a);
    let dst = to_cartesian(cloud_b);
    if src.len() < 3 || dst.len() < 3 {
        return Err(IcpError::DegenerateCloud);
    }
    let tree = KdTree::build(dst);

    let mut transform = *init;
    let mut prev_rms = f64::INFINITY;
    let mut rms = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        let mut pairs_src = Vec::with_capacity(src.len());
        let mut pairs_dst = Vec::with_capacity(src.len());
        let mut sq_sum = 0.0;
        for &p in &src {
            let moved = transform.transform(p);
            let (idx, dist) = tree.nearest(moved).unwrap();
            if dist <= config.max_corr_dist {
                pairs_src.push(p);
                pairs_dst.push(tree.points[idx]);
                sq_sum += dist * dist;
            }
        }
        if pairs_src.len() < 3 {
            return Err(IcpError::NoCorrespondences);
        }
        rms = (sq_sum / pairs_src.len() as f64).sqrt();
        if (prev_rms - rms).abs() < config.tol {
            converged = true;
            break;
        }
        prev_rms = rms;
        transform = kabsch(&pairs_src, &pairs_dst)?;
    }
    Ok(IcpResult { transform, rms, iterations, converged })
}
