//! Importance-sampling registration: draw transforms from the prior, weight
//! each by the bidirectional mask likelihood, and summarize the posterior by
//! its mean and tangent-space covariance.

use crate::depthimage::DepthImage;
use crate::geometry::{log6, GeometryError, Mat3, RigidTransform, Vec3, Vec6};
use crate::priors::{Prior, PriorError, PriorSpec};
use crate::sensor::{cloud_log_likelihood, PointLikelihoodConfig};
use nalgebra::Matrix6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("image has no object pixels")]
    EmptyImage,
    #[error("all {evaluated} samples were rejected by the mask likelihood")]
    AllSamplesRejected { evaluated: usize },
    #[error("rotation mean is degenerate (antipodal ambiguity)")]
    DegenerateRotationMean,
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone)]
pub struct RegisterConfig {
    /// Number of transform hypotheses drawn from the prior.
    pub n_samples: usize,
    /// Per-cloud subsample size for likelihood evaluation.
    pub n_points: usize,
    pub seed: u64,
    /// Worker threads: 0 = all available, 1 = sequential. Results are
    /// identical for any value.
    pub threads: usize,
    pub point: PointLikelihoodConfig,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_points: 200,
            seed: 0,
            threads: 0,
            point: PointLikelihoodConfig::default(),
        }
    }
}

/// One surviving transform hypothesis.
#[derive(Debug, Clone)]
pub struct WeightedSample {
    pub transform: RigidTransform,
    /// Unnormalized log importance weight.
    pub log_weight: f64,
    /// Normalized weight; the set sums to one.
    pub weight: f64,
}

/// Weighted sample representation of the transform posterior.
#[derive(Debug, Clone)]
pub struct TransformPosterior {
    pub samples: Vec<WeightedSample>,
    pub mean: RigidTransform,
    /// 6x6 covariance in tangent coordinates at the mean.
    pub covariance: Matrix6<f64>,
    pub effective_sample_size: f64,
    pub rejected_count: usize,
    pub evaluated_count: usize,
}

/// SplitMix64 step, used to derive independent per-sample RNG streams.
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn evaluate_sample(
    l: u64,
    seed: u64,
    prior: &Prior,
    pts_a: &[crate::geometry::RayPoint],
    pts_b: &[crate::geometry::RayPoint],
    img_a: &DepthImage,
    img_b: &DepthImage,
    point_config: &PointLikelihoodConfig,
) -> Option<(RigidTransform, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, l));
    let t = prior.sample(&mut rng);
    // p(P_B | M_A, T): points of B against image A, whose frame maps to B's by T
    let lw_ba = cloud_log_likelihood(pts_b, img_a, &t, point_config)?;
    // p(P_A | M_B, T): roles swapped, transform inverted
    let lw_ab = cloud_log_likelihood(pts_a, img_b, &t.inverse(), point_config)?;
    Some((t, lw_ba + lw_ab))
}

/// Estimates the posterior over the transform mapping image A's frame into
/// image B's frame.
pub fn register(
    img_a: &DepthImage,
    img_b: &DepthImage,
    prior_spec: &PriorSpec,
    config: &RegisterConfig,
) -> Result<TransformPosterior, RegisterError> {
    if img_a.object_cloud().is_empty() || img_b.object_cloud().is_empty() {
        return Err(RegisterError::EmptyImage);
    }
    assert!(config.n_samples >= 1);

    let pts_a = img_a.subsample_object(config.n_points, mix(config.seed, u64::MAX - 1));
    let pts_b = img_b.subsample_object(config.n_points, mix(config.seed, u64::MAX - 2));
    let prior = Prior::new(prior_spec, img_a.object_cloud(), img_b.object_cloud())?;

    let eval = |l: u64| {
        evaluate_sample(l, config.seed, &prior, &pts_a, &pts_b, img_a, img_b, &config.point)
    };

    let results: Vec<Option<(RigidTransform, f64)>> = run_samples(config, &eval);

    let evaluated_count = results.len();
    let mut transforms = Vec::new();
    let mut log_weights = Vec::new();
    for r in results.into_iter().flatten() {
        transforms.push(r.0);
        log_weights.push(r.1);
    }
    let rejected_count = evaluated_count - transforms.len();
    if transforms.is_empty() {
        return Err(RegisterError::AllSamplesRejected { evaluated: evaluated_count });
    }

    let weights = normalize_log_weights(&log_weights);
    let pairs: Vec<(RigidTransform, f64)> =
        transforms.iter().cloned().zip(weights.iter().cloned()).collect();
    let mean = posterior_mean(&pairs)?;
    let covariance = posterior_covariance(&pairs, &mean)?;
    let ess = effective_sample_size(&weights);

    let samples = transforms
        .into_iter()
        .zip(log_weights)
        .zip(weights)
        .map(|((transform, log_weight), weight)| WeightedSample { transform, log_weight, weight })
        .collect();

    Ok(TransformPosterior {
        samples,
        mean,
        covariance,
        effective_sample_size: ess,
        rejected_count,
        evaluated_count,
    })
}

#[cfg(feature = "parallel")]
fn run_samples<F>(config: &RegisterConfig, eval: &F) -> Vec<Option<(RigidTransform, f64)>>
where
    F: Fn(u64) -> Option<(RigidTransform, f64)> + Sync,
{
    use rayon::prelude::*;
    if config.threads == 1 {
        return (0..config.n_samples as u64).map(eval).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .expect("failed to build thread pool");
    // index-ordered collect keeps the result independent of scheduling
    pool.install(|| (0..config.n_samples as u64).into_par_iter().map(eval).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_samples<F>(config: &RegisterConfig, eval: &F) -> Vec<Option<(RigidTransform, f64)>>
where
    F: Fn(u64) -> Option<(RigidTransform, f64)>,
{
    (0..config.n_samples as u64).map(eval).collect()
}

/// Log-sum-exp normalization.
pub fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Weighted mean transform: arithmetic mean of translations and the weighted
/// chordal mean of rotations (polar projection of the weighted rotation sum).
pub fn posterior_mean(samples: &[(RigidTransform, f64)]) -> Result<RigidTransform, RegisterError> {
    assert!(!samples.is_empty());
    let mut t_sum = Vec3::zeros();
    let mut r_sum = Mat3::zeros();
    for (t, w) in samples {
        t_sum += t.translation * *w;
        r_sum += t.rotation * *w;
    }
    let svd = r_sum.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    if svd.singular_values[2] < 1e-12 {
        return Err(RegisterError::DegenerateRotationMean);
    }
    let det = (u * v_t).determinant();
    let fix = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, det.signum()));
    Ok(RigidTransform::new(u * fix * v_t, t_sum))
}

/// Weighted scatter of tangent residuals at the mean.
pub fn posterior_covariance(
    samples: &[(RigidTransform, f64)],
    mean: &RigidTransform,
) -> Result<Matrix6<f64>, RegisterError> {
    let mean_inv = mean.inverse();
    let mut cov = Matrix6::zeros();
    for (t, w) in samples {
        let delta: Vec6 = log6(&mean_inv.compose(t))?;
        cov += delta * delta.transpose() * *w;
    }
    Ok(cov)
}

/// Degeneracy diagnostic 1/sum(w^2) for normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}
