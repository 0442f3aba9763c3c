//! Synthetic depth-image generator: ray-casts primitive scenes (boxes, capped
//! cylinders, unions) above a table plane, with Gaussian range noise applied
//! in ray coordinates and exact ground-truth poses.

use crate::depthimage::{CameraModel, DepthImage, PixelObservation};
use crate::geometry::{RigidTransform, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Solid primitive in its own local frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Primitive {
    /// Axis-aligned box with the given half extents.
    Box { half_extents: [f64; 3] },
    /// Cylinder along the local z axis with flat caps.
    Cylinder { radius: f64, half_length: f64 },
}

/// A primitive posed within the object frame.
#[derive(Debug, Clone)]
pub struct PosedPrimitive {
    pub primitive: Primitive,
    pub pose: RigidTransform,
}

/// Infinite table plane given by a point and a unit normal (camera frame).
#[derive(Debug, Clone, Copy)]
pub struct TablePlane {
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub primitives: Vec<PosedPrimitive>,
    /// Object pose in the camera frame.
    pub object_pose: RigidTransform,
    pub table: Option<TablePlane>,
}

/// Closest intersection distance of ray `origin + t * dir` (|dir| = 1) with
/// an axis-aligned box of the given half extents, by slab clipping.
fn ray_box(origin: Vec3, dir: Vec3, half: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            if origin[axis].abs() > half[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let mut t0 = (-half[axis] - origin[axis]) * inv;
        let mut t1 = (half[axis] - origin[axis]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_far < 0.0 {
        return None;
    }
    Some(if t_near >= 0.0 { t_near } else { t_far })
}

/// Closest intersection with a z-axis cylinder with flat caps.
fn ray_cylinder(origin: Vec3, dir: Vec3, radius: f64, half_length: f64) -> Option<f64> {
    let mut best: Option<f64> = None;
    let mut consider = |t: f64| {
        if t >= 0.0 && best.map_or(true, |b| t < b) {
            best = Some(t);
        }
    };
    // lateral surface: quadratic in (x, y)
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 1e-15 {
        let b = 2.0 * (origin.x * dir.x + origin.y * dir.y);
        let c = origin.x * origin.x + origin.y * origin.y - radius * radius;
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                let z = origin.z + t * dir.z;
                if z.abs() <= half_length {
                    consider(t);
                }
            }
        }
    }
    // caps
    if dir.z.abs() > 1e-15 {
        for zc in [half_length, -half_length] {
            let t = (zc - origin.z) / dir.z;
            let x = origin.x + t * dir.x;
            let y = origin.y + t * dir.y;
            if x * x + y * y <= radius * radius {
                consider(t);
            }
        }
    }
    best
}

impl Primitive {
    fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match self {
            Primitive::Box { half_extents } => ray_box(origin, dir, *half_extents),
            Primitive::Cylinder { radius, half_length } => {
                ray_cylinder(origin, dir, *radius, *half_length)
            }
        }
    }
}

/// Distance along a camera ray to the nearest object surface, if any.
pub fn cast_object(scene: &SceneSpec, dir: Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for pp in &scene.primitives {
        let world = scene.object_pose.compose(&pp.pose);
        let inv = world.inverse();
        let o = inv.transform(Vec3::zeros());
        let d = inv.rotation * dir;
        if let Some(t) = pp.primitive.intersect(o, d) {
            if best.map_or(true, |b| t < b) {
                best = Some(t);
            }
        }
    }
    best
}

fn cast_table(table: &TablePlane, dir: Vec3) -> Option<f64> {
    let denom = table.normal.dot(&dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = table.normal.dot(&table.point) / denom;
    (t > 0.0).then_some(t)
}

/// Renders the scene into a segmented depth image. Per pixel, the nearest
/// object hit wins, then the table (background), else unknown. Gaussian noise
/// with standard deviation `sigma` is added to the range coordinate;
/// `sigma = 0` renders noiselessly and deterministically.
pub fn render(scene: &SceneSpec, camera: &CameraModel, noise_seed: u64, sigma: f64) -> DepthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let mut grid = Vec::with_capacity(camera.width * camera.height);
    for row in 0..camera.height {
        for col in 0..camera.width {
            let (w, h) = camera.pixel_to_wh(col as f64, row as f64);
            let dir = Vec3::new(w, h, 1.0).normalize();
            let noise = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            let px = if let Some(r) = cast_object(scene, dir) {
                PixelObservation::object((r + noise).max(camera.r_min))
            } else if let Some(r) = scene.table.as_ref().and_then(|t| cast_table(t, dir)) {
                PixelObservation::background((r + noise).max(camera.r_min))
            } else {
                PixelObservation::UNKNOWN
            };
            grid.push(px);
        }
    }
    DepthImage::new(camera.clone(), grid).expect("render produced a consistent grid")
}

/// Renders a motion sequence: frame k applies `motions[k-1]` to the previous
/// object pose. Returns each frame with its exact absolute object pose.
pub fn make_sequence(
    scene: &SceneSpec,
    motions: &[RigidTransform],
    camera: &CameraModel,
    sigma: f64,
    seed: u64,
) -> Vec<(DepthImage, RigidTransform)> {
    let mut frames = Vec::with_capacity(motions.len() + 1);
    let mut pose = scene.object_pose;
    let mut current = scene.clone();
    frames.push((render(&current, camera, seed, sigma), pose));
    for (k, motion) in motions.iter().enumerate() {
        pose = motion.compose(&pose);
        current.object_pose = pose;
        frames.push((render(&current, camera, seed.wrapping_add(1 + k as u64), sigma), pose));
    }
    frames
}
