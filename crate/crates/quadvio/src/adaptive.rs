//! Walking-motion-adaptive factor for the leg kinematic constraint.
//!
//! Per window frame we track the mean pixel displacement of features shared
//! with the previous frame. The scatter of those means over the window is a
//! proxy for how much the body wobbles while walking: the larger the walking
//! motion, the larger the image-plane motion. Eigen-decomposing the 2x2
//! scatter gives principal wobble directions; their (normalized, clamped)
//! square roots become the gains of a 3x3 matrix Gamma that scales the leg
//! residual. The image x/y axes map onto the body y/z axes, and the body x
//! axis keeps gain exactly 1.
//!
//! Applying Gamma to the residual is algebraically the same as replacing the
//! information matrix by Gamma^T Omega Gamma.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

/// Pixel observations of one frame keyed by feature id.
pub type ObservationMap = BTreeMap<u64, Vector2<f64>>;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptiveError {
    #[error("need at least two valid frame motions, got {0}")]
    DegenerateWindow(usize),
}

/// Mean feature displacement between one frame and its predecessor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameMotion {
    pub frame_index: usize,
    /// Mean (du, dv) over features present in both frames (px).
    pub displacement: Vector2<f64>,
    /// Number of features that entered the mean.
    pub count: usize,
}

impl FrameMotion {
    pub fn is_valid(&self) -> bool {
        self.count >= 1
    }
}

/// Mean displacement of the features common to both observation maps.
///
/// Returns an invalid entry (count = 0) when the frames share no features;
/// callers fall back to the identity factor in that case.
pub fn frame_motion(
    prev_obs: &ObservationMap,
    curr_obs: &ObservationMap,
    frame_index: usize,
) -> FrameMotion {
    let mut sum = Vector2::zeros();
    let mut count = 0usize;
    for (id, curr) in curr_obs {
        if let Some(prev) = prev_obs.get(id) {
            sum += curr - prev;
            count += 1;
        }
    }
    let displacement = if count > 0 { sum / count as f64 } else { Vector2::zeros() };
    FrameMotion { frame_index, displacement, count }
}

/// Scatter of the mean displacements over the window, embedded as the 3x3
/// matrix with a leading 1: image x/y occupy the body y/z slots.
pub fn motion_covariance(motions: &[FrameMotion]) -> Result<Matrix3<f64>, AdaptiveError> {
    let valid: Vec<&FrameMotion> = motions.iter().filter(|m| m.is_valid()).collect();
    if valid.len() < 2 {
        return Err(AdaptiveError::DegenerateWindow(valid.len()));
    }
    let n = valid.len() as f64;
    let mean: Vector2<f64> = valid.iter().map(|m| m.displacement).sum::<Vector2<f64>>() / n;
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for m in &valid {
        let d = m.displacement - mean;
        cxx += d.x * d.x;
        cxy += d.x * d.y;
        cyy += d.y * d.y;
    }
    Ok(Matrix3::new(1.0, 0.0, 0.0, 0.0, cxx, cxy, 0.0, cxy, cyy))
}

/// Normalization and clamping applied to the scatter eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaConfig {
    /// Pixel variance that maps to gain 1 (px^2).
    pub sigma_ref_sq: f64,
    /// Lower clamp on Gamma's eigenvalues.
    pub gamma_min: f64,
    /// Upper clamp on Gamma's eigenvalues.
    pub gamma_max: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        Self { sigma_ref_sq: 4.0, gamma_min: 0.5, gamma_max: 5.0 }
    }
}

/// The reweighting matrix for the leg residual, rebuilt once per
/// optimization round and held fixed within the solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveFactor {
    pub gamma: Matrix3<f64>,
    /// Eigenvalues (1, l1, l2) of the raw motion covariance, descending.
    pub cov_eigenvalues: [f64; 3],
    /// Eigenvalues of Gamma after normalization and clamping, same order.
    pub gamma_eigenvalues: [f64; 3],
    /// Normalized but unclamped Gamma eigenvalues, for diagnostics.
    pub unclamped_eigenvalues: [f64; 3],
    /// Number of frame motions the covariance was computed from.
    pub window_size: usize,
}

impl AdaptiveFactor {
    /// The fixed-factor baseline: Gamma = diag(1, g, g), keeping the unit
    /// gain on the body x axis like the adaptive factor does.
    pub fn fixed(g: f64) -> Self {
        let mut gamma = Matrix3::identity();
        gamma[(1, 1)] = g;
        gamma[(2, 2)] = g;
        Self {
            gamma,
            cov_eigenvalues: [1.0, 0.0, 0.0],
            gamma_eigenvalues: [1.0, g, g],
            unclamped_eigenvalues: [1.0, g, g],
            window_size: 0,
        }
    }

    pub fn identity() -> Self {
        Self::fixed(1.0)
    }
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix.
/// Returns (l1, l2, v1) with l1 >= l2 and v1 the unit eigenvector of l1.
fn symmetric_eigen_2x2(m: &Matrix2<f64>) -> (f64, f64, Vector2<f64>) {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mean = 0.5 * (a + c);
    let diff = 0.5 * (a - c);
    let rad = (diff * diff + b * b).sqrt();
    let l1 = mean + rad;
    let l2 = mean - rad;
    let v1 = if b.abs() > 1e-300 {
        Vector2::new(b, l1 - a).normalize()
    } else if diff >= 0.0 {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    (l1, l2, v1)
}

/// Builds Gamma from the motion covariance.
///
/// The 2x2 scatter block is eigen-decomposed, each eigenvalue divided by
/// `sigma_ref_sq` and clamped to [gamma_min^2, gamma_max^2], and Gamma is the
/// symmetric square root P diag(1, sqrt(l1), sqrt(l2)) P^T in body axes.
pub fn compute_gamma(cov: &Matrix3<f64>, config: &GammaConfig) -> AdaptiveFactor {
    let scatter = cov.fixed_view::<2, 2>(1, 1).into_owned();
    let (l1, l2, v1) = symmetric_eigen_2x2(&scatter);
    let v2 = Vector2::new(-v1.y, v1.x);

    let lo = config.gamma_min * config.gamma_min;
    let hi = config.gamma_max * config.gamma_max;
    let n1 = l1 / config.sigma_ref_sq;
    let n2 = l2 / config.sigma_ref_sq;
    let g1 = n1.clamp(lo, hi).sqrt();
    let g2 = n2.clamp(lo, hi).sqrt();

    let block = g1 * v1 * v1.transpose() + g2 * v2 * v2.transpose();
    let mut gamma = Matrix3::identity();
    gamma.fixed_view_mut::<2, 2>(1, 1).copy_from(&block);

    AdaptiveFactor {
        gamma,
        cov_eigenvalues: [1.0, l1, l2],
        gamma_eigenvalues: [1.0, g1, g2],
        unclamped_eigenvalues: [1.0, n1.sqrt(), n2.sqrt()],
        window_size: 0,
    }
}

/// Convenience: covariance plus Gamma from raw window motions, falling back
/// to the identity factor when the window is degenerate.
pub fn gamma_from_motions(motions: &[FrameMotion], config: &GammaConfig) -> AdaptiveFactor {
    match motion_covariance(motions) {
        Ok(cov) => {
            let mut f = compute_gamma(&cov, config);
            f.window_size = motions.iter().filter(|m| m.is_valid()).count();
            f
        }
        Err(_) => AdaptiveFactor::identity(),
    }
}

/// Applies the factor to a leg residual (Gamma * r).
pub fn weighted_leg_residual(r: &Vector3<f64>, factor: &AdaptiveFactor) -> Vector3<f64> {
    factor.gamma * r
}
