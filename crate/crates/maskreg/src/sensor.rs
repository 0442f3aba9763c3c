//! Likelihood of an observed point against another image's free-space mask.
//!
//! The measurement model is a Gaussian in ray coordinates. Marginalizing the
//! unknown surface point and integrating depth over the free-space claim of
//! each pixel gives, per pixel, a Gaussian factor over the image-plane
//! direction times an erf gate on range. The closed form here is validated
//! against [`numeric_point_likelihood`], which performs the depth integral by
//! adaptive quadrature instead.

use crate::depthimage::{CameraModel, DepthImage, PixelState};
use crate::geometry::{
    linearized_cross_transform, GeometryError, Mat3, RayPoint, RigidTransform, Vec3,
};
use nalgebra::Matrix2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("likelihood terms are singular")]
    SingularTerms,
    #[error("adaptive quadrature did not converge")]
    QuadratureDidNotConverge,
}

/// Per-point terms of the closed-form likelihood.
#[derive(Debug, Clone)]
pub struct LikelihoodTerms {
    /// Precision of the combined two-camera noise in ray coordinates.
    pub lambda: Mat3,
    /// Marginal precision over (w, h): the Schur complement of lambda.
    pub d: Matrix2<f64>,
    /// Erf direction vector; its range component gates free space.
    pub v: Vec3,
    /// Normalization 1 / |L + M L M^T|^(1/2).
    pub k2: f64,
}

#[derive(Debug, Clone)]
pub struct PointLikelihoodConfig {
    /// Pixels within this Mahalanobis distance of the projected point (under
    /// the marginal precision) enter the sum.
    pub window_radius: f64,
    /// Per-point rejection floor: reject when the pixel sum falls at or below
    /// epsilon_reject times K2.
    pub epsilon_reject: f64,
    /// When true, unmeasured pixels contribute the Gaussian factor with a
    /// saturated erf gate (free space unconstrained).
    pub unknown_free: bool,
}

impl Default for PointLikelihoodConfig {
    fn default() -> Self {
        Self { window_radius: 4.0, epsilon_reject: 1e-12, unknown_free: true }
    }
}

/// Computes the anchor (the point expressed in the image frame) and the
/// closed-form likelihood terms for observed point `b` under transform `t`
/// (mapping the image frame into b's frame) and sensor noise `l`.
pub fn likelihood_terms(
    b: RayPoint,
    t: &RigidTransform,
    l: &Mat3,
) -> Result<(RayPoint, LikelihoodTerms), SensorError> {
    let (anchor, m) = linearized_cross_transform(b, t)?;
    let m_inv = m.try_inverse().ok_or(SensorError::SingularTerms)?;
    let lambda_inv = m_inv * l * m_inv.transpose() + l;
    let lambda_raw = lambda_inv.try_inverse().ok_or(SensorError::SingularTerms)?;
    let lambda = (lambda_raw + lambda_raw.transpose()) * 0.5;

    let k2_det = (l + m * l * m.transpose()).determinant();
    if !(k2_det > 0.0) {
        return Err(SensorError::SingularTerms);
    }
    let k2 = 1.0 / k2_det.sqrt();

    let l33 = lambda[(2, 2)];
    if !(l33 > 0.0) {
        return Err(SensorError::SingularTerms);
    }
    let d = Matrix2::new(
        lambda[(0, 0)] * l33 - lambda[(2, 0)] * lambda[(2, 0)],
        l33 * lambda[(1, 0)] - lambda[(2, 0)] * lambda[(2, 1)],
        l33 * lambda[(1, 0)] - lambda[(2, 0)] * lambda[(2, 1)],
        lambda[(1, 1)] * l33 - lambda[(2, 1)] * lambda[(2, 1)],
    ) / l33;
    let v = Vec3::new(lambda[(2, 0)], lambda[(2, 1)], l33) / (2.0 * l33).sqrt();

    Ok((anchor, LikelihoodTerms { lambda, d, v, k2 }))
}

/// Inclusive pixel index bounds of the evaluation window around the anchor.
/// Indices may lie outside the grid; such slots are unmeasured by definition.
fn window_bounds(
    camera: &CameraModel,
    anchor: &RayPoint,
    d: &Matrix2<f64>,
    radius: f64,
) -> Option<(i64, i64, i64, i64)> {
    let d_inv = d.try_inverse()?;
    if !(d_inv[(0, 0)] > 0.0 && d_inv[(1, 1)] > 0.0) {
        return None;
    }
    let dw = radius * d_inv[(0, 0)].sqrt();
    let dh = radius * d_inv[(1, 1)].sqrt();
    let (c_lo, r_lo) = camera.wh_to_pixel(anchor.w - dw, anchor.h - dh);
    let (c_hi, r_hi) = camera.wh_to_pixel(anchor.w + dw, anchor.h + dh);
    let (mut col_lo, mut col_hi) = (c_lo.floor() as i64, c_hi.ceil() as i64);
    let (mut row_lo, mut row_hi) = (r_lo.floor() as i64, r_hi.ceil() as i64);
    // hard cap against degenerate geometry blowing the window up
    const MAX_HALF_SPAN: i64 = 128;
    let (cc, rc) = camera.wh_to_pixel(anchor.w, anchor.h);
    let (cc, rc) = (cc.round() as i64, rc.round() as i64);
    col_lo = col_lo.max(cc - MAX_HALF_SPAN);
    col_hi = col_hi.min(cc + MAX_HALF_SPAN);
    row_lo = row_lo.max(rc - MAX_HALF_SPAN);
    row_hi = row_hi.min(rc + MAX_HALF_SPAN);
    Some((col_lo, col_hi, row_lo, row_hi))
}

fn pixel_in_grid(img: &DepthImage, col: i64, row: i64) -> Option<PixelState> {
    let cam = img.camera();
    if col < 0 || row < 0 || col >= cam.width as i64 || row >= cam.height as i64 {
        None
    } else {
        Some(img.pixel(col as usize, row as usize).state)
    }
}

/// Log-likelihood of observed point `b` against the free-space mask of `img`,
/// up to the shared per-cloud normalization. `t` maps `img`'s frame into the
/// frame `b` was observed in. Returns `None` (REJECT) when the point projects
/// behind the camera or its pixel sum falls below the rejection floor.
pub fn point_log_likelihood(
    b: RayPoint,
    img: &DepthImage,
    t: &RigidTransform,
    config: &PointLikelihoodConfig,
) -> Option<f64> {
    let l = &img.camera().noise;
    let Ok((anchor, terms)) = likelihood_terms(b, t, l) else {
        return None;
    };
    let sum = window_sum(&anchor, img, &terms, config)?;
    if sum <= config.epsilon_reject * terms.k2 {
        None
    } else {
        Some(terms.k2.ln() + sum.ln())
    }
}

/// The pixel sum of Gaussian-times-erf factors over the evaluation window.
fn window_sum(
    anchor: &RayPoint,
    img: &DepthImage,
    terms: &LikelihoodTerms,
    config: &PointLikelihoodConfig,
) -> Option<f64> {
    let cam = img.camera();
    let (col_lo, col_hi, row_lo, row_hi) =
        window_bounds(cam, anchor, &terms.d, config.window_radius)?;
    let radius2 = config.window_radius * config.window_radius;
    let mut sum = 0.0;
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let (wc, hc) = cam.pixel_to_wh(col as f64, row as f64);
            let dw = anchor.w - wc;
            let dh = anchor.h - hc;
            let maha = terms.d[(0, 0)] * dw * dw
                + 2.0 * terms.d[(0, 1)] * dw * dh
                + terms.d[(1, 1)] * dh * dh;
            if maha > radius2 {
                continue;
            }
            let gauss = (-0.5 * maha).exp();
            match pixel_in_grid(img, col, row) {
                Some(PixelState::Object) | Some(PixelState::Background) => {
                    let depth = img.pixel(col as usize, row as usize).depth;
                    let d = Vec3::new(dw, dh, anchor.r - depth);
                    // 1 + erf(x) computed as erfc(-x): the direct form loses
                    // all precision in the deep free-space tail (x < -6)
                    sum += gauss * libm::erfc(-terms.v.dot(&d));
                }
                // unmeasured (unknown or outside the frustum): no free-space
                // claim, the erf gate saturates
                _ => {
                    if config.unknown_free {
                        sum += 2.0 * gauss;
                    }
                }
            }
        }
    }
    Some(sum)
}

/// Fully normalized closed-form density of `b`: the same pixel sum scaled so
/// it equals the integral the numeric oracle computes.
pub fn point_likelihood_density(
    b: RayPoint,
    img: &DepthImage,
    t: &RigidTransform,
    config: &PointLikelihoodConfig,
) -> Result<f64, SensorError> {
    let l = &img.camera().noise;
    let (anchor, terms) = likelihood_terms(b, t, l)?;
    let sum = window_sum(&anchor, img, &terms, config).ok_or(SensorError::SingularTerms)?;
    let l33 = terms.lambda[(2, 2)];
    let two_pi = 2.0 * std::f64::consts::PI;
    let scale = two_pi.powf(-1.5) * (std::f64::consts::PI / (2.0 * l33)).sqrt();
    Ok(terms.k2 * sum * scale)
}

/// Numeric oracle: evaluates the per-pixel depth integral of the Gaussian
/// measurement model by adaptive quadrature over the same pixel window, with
/// the integration range extended until the truncated tail is negligible.
/// Used by tests to validate the closed form.
pub fn numeric_point_likelihood(
    b: RayPoint,
    img: &DepthImage,
    t: &RigidTransform,
    config: &PointLikelihoodConfig,
) -> Result<f64, SensorError> {
    let cam = img.camera();
    let (anchor, terms) = likelihood_terms(b, t, &cam.noise)?;
    let lambda = terms.lambda;
    let k1 = (2.0 * std::f64::consts::PI).powf(-1.5) * terms.k2;
    let (col_lo, col_hi, row_lo, row_hi) =
        window_bounds(cam, &anchor, &terms.d, config.window_radius)
            .ok_or(SensorError::SingularTerms)?;
    let radius2 = config.window_radius * config.window_radius;
    let sigma_u = 1.0 / lambda[(2, 2)].sqrt();

    let mut sum = 0.0;
    for row in row_lo..=row_hi {
        for col in col_lo..=col_hi {
            let (wc, hc) = cam.pixel_to_wh(col as f64, row as f64);
            let dw = anchor.w - wc;
            let dh = anchor.h - hc;
            let maha = terms.d[(0, 0)] * dw * dw
                + 2.0 * terms.d[(0, 1)] * dw * dh
                + terms.d[(1, 1)] * dh * dh;
            if maha > radius2 {
                continue;
            }
            let integrand = |r: f64| {
                let d = Vec3::new(dw, dh, anchor.r - r);
                (-0.5 * (d.transpose() * lambda * d)[(0, 0)]).exp()
            };
            // peak of the integrand along r
            let u_star = -(lambda[(0, 2)] * dw + lambda[(1, 2)] * dh) / lambda[(2, 2)];
            let r_peak = anchor.r - u_star;
            let measured = pixel_in_grid(img, col, row)
                .filter(|s| *s != PixelState::Unknown)
                .map(|_| img.pixel(col as usize, row as usize).depth);
            let (lo, hi) = match measured {
                Some(depth) => (depth, r_peak.max(depth) + 12.0 * sigma_u),
                None => {
                    if !config.unknown_free {
                        continue;
                    }
                    (r_peak - 12.0 * sigma_u, r_peak + 12.0 * sigma_u)
                }
            };
            sum += adaptive_simpson(&integrand, lo, hi, 1e-10)?;
        }
    }
    Ok(k1 * sum)
}

/// Adaptive Simpson quadrature with absolute-plus-relative tolerance.
fn adaptive_simpson(
    f: &impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
) -> Result<f64, SensorError> {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, SensorError> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let err = left + right - whole;
        if err.abs() <= 15.0 * tol {
            return Ok(left + right + err / 15.0);
        }
        if depth == 0 {
            return Err(SensorError::QuadratureDidNotConverge);
        }
        Ok(recurse(f, a, m, fa, flm, fm, left, tol * 0.5, depth - 1)?
            + recurse(f, m, b, fm, frm, fb, right, tol * 0.5, depth - 1)?)
    }
    if hi <= lo {
        return Ok(0.0);
    }
    // evaluate on a dense grid first: the chunking guarantees a narrow
    // interior peak is seen, and the peak magnitude sets the tolerance scale
    const CHUNKS: usize = 128;
    let mut grid = [0.0; 2 * CHUNKS + 1];
    let mut peak = 0.0f64;
    for (i, slot) in grid.iter_mut().enumerate() {
        let x = lo + (hi - lo) * (i as f64 / (2 * CHUNKS) as f64);
        *slot = f(x);
        peak = peak.max(slot.abs());
    }
    let chunk_tol = tol * (peak * (hi - lo) + 1e-300) / CHUNKS as f64;

    let mut total = 0.0;
    for i in 0..CHUNKS {
        let a = lo + (hi - lo) * (i as f64 / CHUNKS as f64);
        let b = lo + (hi - lo) * ((i + 1) as f64 / CHUNKS as f64);
        let (fa, fm, fb) = (grid[2 * i], grid[2 * i + 1], grid[2 * i + 2]);
        let whole = simpson(fa, fm, fb, a, b);
        total += recurse(f, a, b, fa, fm, fb, whole, chunk_tol, 40)?;
    }
    Ok(total)
}

/// Sum of per-point log-likelihoods over a cloud; REJECT (None) as soon as
/// any point rejects.
pub fn cloud_log_likelihood(
    points: &[RayPoint],
    img: &DepthImage,
    t: &RigidTransform,
    config: &PointLikelihoodConfig,
) -> Option<f64> {
    debug_assert!(!points.is_empty());
    let mut total = 0.0;
    for &p in points {
        total += point_log_likelihood(p, img, t, config)?;
    }
    Some(total)
}
