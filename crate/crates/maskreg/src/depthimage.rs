//! Segmented depth image: surface patches (the object point cloud) and the
//! per-pixel free-space mask, plus the pixel lookup used by the likelihood.

use crate::geometry::{Mat3, RayPoint};
use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DepthImageError {
    #[error("grid size {got} does not match {width}x{height}")]
    GridSizeMismatch { got: usize, width: usize, height: usize },
    #[error("noise covariance is not symmetric positive definite")]
    BadNoiseCovariance,
    #[error("near range r_min must be positive, got {0}")]
    BadNearRange(f64),
}

/// Pinhole camera with a ray-coordinate noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Principal point (cx, cy) in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Sensor noise covariance in ray coordinates (w, h dimensionless; r meters).
    pub noise: Mat3,
    /// Near range in meters; free space claims start here.
    pub r_min: f64,
}

impl CameraModel {
    /// Isotropic noise with standard deviation `sigma`.
    pub fn isotropic(
        width: usize,
        height: usize,
        focal: f64,
        cx: f64,
        cy: f64,
        sigma: f64,
        r_min: f64,
    ) -> Self {
        Self { width, height, focal, cx, cy, noise: Mat3::identity() * sigma * sigma, r_min }
    }

    /// Ray-plane coordinates of a pixel center.
    pub fn pixel_to_wh(&self, col: f64, row: f64) -> (f64, f64) {
        ((col - self.cx) / self.focal, (row - self.cy) / self.focal)
    }

    /// Continuous pixel coordinates of a ray direction.
    pub fn wh_to_pixel(&self, w: f64, h: f64) -> (f64, f64) {
        (w * self.focal + self.cx, h * self.focal + self.cy)
    }

    pub fn validate(&self) -> Result<(), DepthImageError> {
        if self.r_min <= 0.0 {
            return Err(DepthImageError::BadNearRange(self.r_min));
        }
        let sym = (self.noise - self.noise.transpose()).norm() < 1e-12 * self.noise.norm();
        if !sym || self.noise.cholesky().is_none() {
            return Err(DepthImageError::BadNoiseCovariance);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelState {
    Unknown,
    Object,
    Background,
}

/// One depth-image pixel: a segmentation label and, when measured, a depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelObservation {
    pub state: PixelState,
    /// Range in meters; only meaningful when state != Unknown.
    pub depth: f64,
}

impl PixelObservation {
    pub const UNKNOWN: Self = Self { state: PixelState::Unknown, depth: 0.0 };

    pub fn object(depth: f64) -> Self {
        Self { state: PixelState::Object, depth }
    }

    pub fn background(depth: f64) -> Self {
        Self { state: PixelState::Background, depth }
    }

    pub fn is_measured(&self) -> bool {
        self.state != PixelState::Unknown
    }
}

/// Result of projecting a ray direction onto the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelLookup {
    InView { col: usize, row: usize },
    OutOfView,
}

/// Segmented depth image; immutable after construction.
#[derive(Debug, Clone)]
pub struct DepthImage {
    camera: CameraModel,
    grid: Vec<PixelObservation>,
    object_points: Vec<RayPoint>,
}

impl DepthImage {
    pub fn new(camera: CameraModel, grid: Vec<PixelObservation>) -> Result<Self, DepthImageError> {
        camera.validate()?;
        if grid.len() != camera.width * camera.height {
            return Err(DepthImageError::GridSizeMismatch {
                got: grid.len(),
                width: camera.width,
                height: camera.height,
            });
        }
        let mut object_points = Vec::new();
        for row in 0..camera.height {
            for col in 0..camera.width {
                let px = grid[row * camera.width + col];
                if px.state == PixelState::Object {
                    let (w, h) = camera.pixel_to_wh(col as f64, row as f64);
                    object_points.push(RayPoint::new(w, h, px.depth));
                }
            }
        }
        Ok(Self { camera, grid, object_points })
    }

    pub fn camera(&self) -> &CameraModel {
        &self.camera
    }

    pub fn pixel(&self, col: usize, row: usize) -> PixelObservation {
        self.grid[row * self.camera.width + col]
    }

    pub fn grid(&self) -> &[PixelObservation] {
        &self.grid
    }

    /// Surface patches as ray points, row-major pixel order.
    pub fn object_cloud(&self) -> &[RayPoint] {
        &self.object_points
    }

    /// Nearest pixel whose center maps to the given ray direction.
    pub fn pixel_at(&self, w: f64, h: f64) -> PixelLookup {
        let (pc, pr) = self.camera.wh_to_pixel(w, h);
        let col = pc.round();
        let row = pr.round();
        if col < 0.0
            || row < 0.0
            || col >= self.camera.width as f64
            || row >= self.camera.height as f64
        {
            PixelLookup::OutOfView
        } else {
            PixelLookup::InView { col: col as usize, row: row as usize }
        }
    }

    /// Uniform subset of the object cloud without replacement, reproducible
    /// under `seed`. Returns the full cloud when it has at most `n_max` points.
    pub fn subsample_object(&self, n_max: usize, seed: u64) -> Vec<RayPoint> {
        assert!(n_max >= 1, "n_max must be >= 1");
        if self.object_points.len() <= n_max {
            return self.object_points.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> =
            index_sample(&mut rng, self.object_points.len(), n_max).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.object_points[i]).collect()
    }
}
