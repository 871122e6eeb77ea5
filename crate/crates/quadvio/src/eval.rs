//! Trajectory alignment and translation-error metrics.
//!
//! Estimates are linearly interpolated against ground truth on the estimate
//! timestamps, aligned with a closed-form rigid fit (full SE(3) or
//! yaw-plus-translation), and summarized as RMSE, maximum error, the raw
//! error series, and distance-binned quartiles for boxplot tooling.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dataset::GtRecord;
use crate::geometry::{quat_exp, Pose, UnitQuat};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("estimate and ground truth have no overlapping time range")]
    EmptyOverlap,
    #[error("need at least {need} matched samples, got {got}")]
    TooFewPoints { need: usize, got: usize },
}

/// Alignment applied before measuring errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// Full rigid alignment on positions (rotation + translation).
    Se3,
    /// Yaw rotation + translation only.
    PosYaw,
}

impl AlignMode {
    pub fn name(&self) -> &'static str {
        match self {
            AlignMode::Se3 => "se3",
            AlignMode::PosYaw => "posyaw",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "se3" => Some(AlignMode::Se3),
            "posyaw" => Some(AlignMode::PosYaw),
            _ => None,
        }
    }
}

/// One boxplot row: error quartiles of the samples within a traveled-distance
/// bin. Whiskers are Tukey (1.5 IQR), clamped to the observed extremes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBin {
    pub distance_start: f64,
    pub distance_end: f64,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryErrorReport {
    /// Translation RMSE after alignment (m).
    pub rmse: f64,
    /// Maximum translation error after alignment (m).
    pub max_error: f64,
    /// (timestamp, translation error) per matched sample.
    pub errors: Vec<(f64, f64)>,
    /// Transform that was applied to the estimate.
    pub alignment: Pose,
    pub align_mode: AlignMode,
    pub distance_bins: Vec<DistanceBin>,
}

fn interpolate_gt(gt: &[GtRecord], t: f64) -> Option<Vector3<f64>> {
    if gt.is_empty() || t < gt[0].timestamp || t > gt[gt.len() - 1].timestamp {
        return None;
    }
    let idx = gt.partition_point(|r| r.timestamp <= t);
    if idx == 0 {
        return Some(gt[0].position);
    }
    if idx >= gt.len() {
        return Some(gt[gt.len() - 1].position);
    }
    let (a, b) = (&gt[idx - 1], &gt[idx]);
    let span = b.timestamp - a.timestamp;
    if span <= 0.0 {
        return Some(a.position);
    }
    let w = (t - a.timestamp) / span;
    Some(a.position * (1.0 - w) + b.position * w)
}

fn umeyama_se3(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Pose {
    let n = est.len() as f64;
    let mu_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt.iter()) {
        h += (g - mu_g) * (e - mu_e).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    let rotation = rotation_to_quat(&r);
    let translation = mu_g - r * mu_e;
    Pose::new(rotation, translation)
}

fn align_posyaw(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Pose {
    let n = est.len() as f64;
    let mu_e: Vector3<f64> = est.iter().sum::<Vector3<f64>>() / n;
    let mu_g: Vector3<f64> = gt.iter().sum::<Vector3<f64>>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, g) in est.iter().zip(gt.iter()) {
        let de = e - mu_e;
        let dg = g - mu_g;
        num += de.x * dg.y - de.y * dg.x;
        den += de.x * dg.x + de.y * dg.y;
    }
    let yaw = num.atan2(den);
    let rotation = quat_exp(&Vector3::new(0.0, 0.0, yaw));
    let translation = mu_g - rotation.rotation_matrix() * mu_e;
    Pose::new(rotation, translation)
}

fn rotation_to_quat(r: &Matrix3<f64>) -> UnitQuat {
    // Shepperd's method
    let trace = r.trace();
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        UnitQuat::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        UnitQuat::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        UnitQuat::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        UnitQuat::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Compares an estimated trajectory against ground truth.
///
/// Matches every estimate timestamp inside the ground-truth range (linear
/// interpolation on position), applies the requested alignment, and reports
/// RMSE, max error, the error series, and `n_bins` distance-binned quartiles.
pub fn trajectory_error(
    estimate: &[GtRecord],
    ground_truth: &[GtRecord],
    mode: AlignMode,
    n_bins: usize,
) -> Result<TrajectoryErrorReport, EvalError> {
    let mut matched: Vec<(f64, Vector3<f64>, Vector3<f64>)> = Vec::new();
    for est in estimate {
        if let Some(gt_pos) = interpolate_gt(ground_truth, est.timestamp) {
            matched.push((est.timestamp, est.position, gt_pos));
        }
    }
    if matched.is_empty() {
        return Err(EvalError::EmptyOverlap);
    }
    if matched.len() < 3 {
        return Err(EvalError::TooFewPoints { need: 3, got: matched.len() });
    }

    let est_pts: Vec<Vector3<f64>> = matched.iter().map(|m| m.1).collect();
    let gt_pts: Vec<Vector3<f64>> = matched.iter().map(|m| m.2).collect();
    let alignment = match mode {
        AlignMode::Se3 => umeyama_se3(&est_pts, &gt_pts),
        AlignMode::PosYaw => align_posyaw(&est_pts, &gt_pts),
    };

    let mut errors = Vec::with_capacity(matched.len());
    let mut sum_sq = 0.0;
    let mut max_error: f64 = 0.0;
    for (t, e, g) in &matched {
        let err = (alignment.transform(e) - g).norm();
        sum_sq += err * err;
        max_error = max_error.max(err);
        errors.push((*t, err));
    }
    let rmse = (sum_sq / errors.len() as f64).sqrt();

    // distance traveled along the matched ground truth
    let mut dist = vec![0.0f64; matched.len()];
    for k in 1..matched.len() {
        dist[k] = dist[k - 1] + (matched[k].2 - matched[k - 1].2).norm();
    }
    let total = dist.last().copied().unwrap_or(0.0);
    let n_bins = n_bins.max(1);
    let mut distance_bins = Vec::new();
    if total > 0.0 {
        for b in 0..n_bins {
            let lo = total * b as f64 / n_bins as f64;
            let hi = total * (b + 1) as f64 / n_bins as f64;
            let mut vals: Vec<f64> = errors
                .iter()
                .zip(dist.iter())
                .filter(|(_, d)| **d >= lo && (**d < hi || (b == n_bins - 1 && **d <= hi)))
                .map(|((_, e), _)| *e)
                .collect();
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let q1 = quantile(&vals, 0.25);
            let median = quantile(&vals, 0.5);
            let q3 = quantile(&vals, 0.75);
            let iqr = q3 - q1;
            distance_bins.push(DistanceBin {
                distance_start: lo,
                distance_end: hi,
                count: vals.len(),
                q1,
                median,
                q3,
                whisker_low: (q1 - 1.5 * iqr).max(vals[0]),
                whisker_high: (q3 + 1.5 * iqr).min(vals[vals.len() - 1]),
            });
        }
    }

    Ok(TrajectoryErrorReport { rmse, max_error, errors, alignment, align_mode: mode, distance_bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn gt_circle(n: usize, dt: f64) -> Vec<GtRecord> {
        (0..n)
            .map(|k| {
                let t = k as f64 * dt;
                GtRecord {
                    timestamp: t,
                    position: Vector3::new((0.1 * t).cos() * 3.0, (0.1 * t).sin() * 3.0, 0.4),
                    orientation: UnitQuat::identity(),
                    velocity: Vector3::zeros(),
                }
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_zero_error() {
        let gt = gt_circle(500, 0.05);
        let report = trajectory_error(&gt, &gt, AlignMode::Se3, 10).unwrap();
        assert!(report.rmse < 1e-12);
        assert!(report.max_error < 1e-12);
        assert_eq!(report.errors.len(), gt.len());
        assert!(report.rmse <= report.max_error);
    }

    #[test]
    fn constant_shift_absorbed_by_alignment() {
        let gt = gt_circle(400, 0.05);
        let shifted: Vec<GtRecord> = gt
            .iter()
            .map(|r| GtRecord { position: r.position + Vector3::new(1.0, 0.0, 0.0), ..*r })
            .collect();
        let report = trajectory_error(&shifted, &gt, AlignMode::Se3, 5).unwrap();
        assert!(report.rmse < 1e-9, "rmse {}", report.rmse);
        let report = trajectory_error(&shifted, &gt, AlignMode::PosYaw, 5).unwrap();
        assert!(report.rmse < 1e-9, "posyaw rmse {}", report.rmse);
    }

    #[test]
    fn iid_noise_rmse_matches_statistics() {
        // sigma per axis -> overall RMSE sigma * sqrt(3) within 10%
        let gt = gt_circle(10_000, 0.01);
        let sigma = 0.05;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let mut noisy = gt.clone();
        for r in &mut noisy {
            for k in 0..3 {
                r.position[k] += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let report = trajectory_error(&noisy, &gt, AlignMode::Se3, 10).unwrap();
        let expected = sigma * 3.0f64.sqrt();
        assert!(
            (report.rmse - expected).abs() / expected < 0.1,
            "rmse {} vs {expected}",
            report.rmse
        );
    }

    #[test]
    fn symmetric_under_common_rigid_transform() {
        let gt = gt_circle(300, 0.05);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(4);
        let mut est = gt.clone();
        for r in &mut est {
            for k in 0..3 {
                r.position[k] += 0.02 * rng.gen_range(-1.0..1.0);
            }
        }
        let base = trajectory_error(&est, &gt, AlignMode::Se3, 8).unwrap();
        let t = Pose::new(
            quat_exp(&Vector3::new(0.3, -0.2, 1.0)),
            Vector3::new(4.0, -1.0, 2.0),
        );
        let map = |rs: &[GtRecord]| -> Vec<GtRecord> {
            rs.iter()
                .map(|r| GtRecord { position: t.transform(&r.position), ..*r })
                .collect()
        };
        let moved = trajectory_error(&map(&est), &map(&gt), AlignMode::Se3, 8).unwrap();
        assert!((base.rmse - moved.rmse).abs() < 1e-9);
        assert!((base.max_error - moved.max_error).abs() < 1e-9);
    }

    #[test]
    fn empty_overlap_detected() {
        let gt = gt_circle(100, 0.05);
        let late: Vec<GtRecord> = gt
            .iter()
            .map(|r| GtRecord { timestamp: r.timestamp + 1000.0, ..*r })
            .collect();
        assert!(matches!(
            trajectory_error(&late, &gt, AlignMode::Se3, 5),
            Err(EvalError::EmptyOverlap)
        ));
    }

    #[test]
    fn distance_bins_cover_series() {
        let gt = gt_circle(1000, 0.05);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let mut est = gt.clone();
        for r in &mut est {
            r.position.x += 0.01 * rng.gen_range(-1.0..1.0);
        }
        let report = trajectory_error(&est, &gt, AlignMode::Se3, 8).unwrap();
        assert_eq!(report.distance_bins.len(), 8);
        let total: usize = report.distance_bins.iter().map(|b| b.count).sum();
        assert_eq!(total, report.errors.len());
        for b in &report.distance_bins {
            assert!(b.q1 <= b.median && b.median <= b.q3);
            assert!(b.whisker_low <= b.q1 && b.q3 <= b.whisker_high);
        }
    }
}
