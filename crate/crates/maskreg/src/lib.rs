//! Probabilistic registration of segmented depth images.
//!
//! Estimates a posterior distribution over the rigid transform between two
//! depth images of an object, using both the observed surface points and the
//! observed free space (the mask). Transform hypotheses are drawn from a
//! task-specific prior and weighted by a closed-form mask likelihood; the
//! weighted sample set yields a mean transform and a 6x6 tangent-space
//! covariance suitable for pose-graph loop closure.
//!
//! Built with data-parallel sample evaluation (rayon) by default; disable the
//! `parallel` feature for a fully sequential build. Results are identical
//! either way.

pub mod depthimage;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod posegraph;
pub mod priors;
pub mod registrar;
pub mod sensor;
pub mod synth;

pub use depthimage::{CameraModel, DepthImage, PixelObservation, PixelState};
pub use geometry::{
    exp6, from_ray, log6, ray_jacobian, to_ray, CartesianPoint, RayPoint, RigidTransform,
};
pub use priors::{Prior, PriorSpec};
pub use registrar::{register, RegisterConfig, TransformPosterior};
pub use sensor::{cloud_log_likelihood, point_log_likelihood, PointLikelihoodConfig};
