//! Feature tracks, inverse-depth triangulation, and the reprojection residual.
//!
//! The frontend consumes id-keyed feature observations (the simulator plays
//! the role of the tracker), so association is exact up to the configured
//! dropout. Landmarks are parameterized by inverse depth in the camera frame
//! of their first observation.

use nalgebra::{Matrix2x3, SMatrix, Vector2, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::geometry::{skew, BodyState, Pose, UnitQuat, DP, DTHETA, STATE_DIM};

/// Residual Jacobian w.r.t. one 15-dim frame state.
pub type ReprojJacobian = SMatrix<f64, 2, STATE_DIM>;

/// Smallest camera-frame depth considered "in front of" the camera.
pub const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum VisionError {
    #[error("track has {0} usable observations, need at least 2")]
    TooFewObservations(usize),
    #[error("insufficient parallax ({max_px:.3} px)")]
    LowParallax { max_px: f64 },
    #[error("triangulated depth {0:.4} m is not positive")]
    NonPositiveDepth(f64),
    #[error("point behind camera (depth {0:.4} m)")]
    PointBehindCamera(f64),
    #[error("inverse depth must be positive, got {0}")]
    InvalidInverseDepth(f64),
}

/// Pinhole camera rigidly attached to the body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera pose in the body frame (maps camera points into the body frame).
    pub body_from_camera: Pose,
    /// White pixel noise std used for weighting (px).
    pub pixel_noise_std: f64,
}

impl CameraModel {
    /// Forward-looking VGA camera: optical axis along body +x, image x along
    /// body -y, image y along body -z.
    pub fn forward_vga() -> Self {
        let rot = UnitQuat::from_euler_zyx(
            -std::f64::consts::FRAC_PI_2,
            0.0,
            -std::f64::consts::FRAC_PI_2,
        );
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            body_from_camera: Pose::new(rot, Vector3::new(0.2, 0.0, 0.0)),
            pixel_noise_std: 1.0,
        }
    }

    /// Projects a camera-frame point; None if behind the camera or outside
    /// the image bounds.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z < MIN_DEPTH {
            return None;
        }
        let u = self.fx * p_cam.x / p_cam.z + self.cx;
        let v = self.fy * p_cam.y / p_cam.z + self.cy;
        if u < 0.0 || u >= self.width as f64 || v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some(Vector2::new(u, v))
    }

    /// Unit-depth ray through a pixel.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    /// World point to camera frame given the body pose.
    pub fn world_to_camera(&self, body_pose: &Pose, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.body_from_camera.inverse().transform(&body_pose.inverse().transform(p_world))
    }

    pub fn camera_pose_in_world(&self, body_pose: &Pose) -> Pose {
        body_pose.compose(&self.body_from_camera)
    }
}

/// One feature seen in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureObservation {
    pub feature_id: u64,
    pub frame_index: usize,
    pub pixel: Vector2<f64>,
}

/// One landmark's observations across window frames plus its inverse depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: u64,
    /// Frame of the first observation; the inverse depth lives in this
    /// frame's camera.
    pub anchor_frame: usize,
    /// 1/depth in the anchor camera (1/m); None until triangulated.
    pub inverse_depth: Option<f64>,
    pub observations: Vec<FeatureObservation>,
}

impl FeatureTrack {
    pub fn last_frame(&self) -> usize {
        self.observations.last().map(|o| o.frame_index).unwrap_or(self.anchor_frame)
    }

    pub fn observation_at(&self, frame_index: usize) -> Option<&FeatureObservation> {
        self.observations.iter().find(|o| o.frame_index == frame_index)
    }

    pub fn anchor_observation(&self) -> &FeatureObservation {
        &self.observations[0]
    }
}

/// Id-keyed track bookkeeping over the sliding window.
#[derive(Debug, Default, Clone)]
pub struct TrackStore {
    tracks: BTreeMap<u64, FeatureTrack>,
}

impl TrackStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Extends tracks with one frame of observations; unknown ids start new
    /// tracks anchored at this frame.
    pub fn update(&mut self, frame_index: usize, observations: &[FeatureObservation]) {
        for obs in observations {
            debug_assert_eq!(obs.frame_index, frame_index);
            self.tracks
                .entry(obs.feature_id)
                .and_modify(|t| t.observations.push(*obs))
                .or_insert_with(|| FeatureTrack {
                    feature_id: obs.feature_id,
                    anchor_frame: frame_index,
                    inverse_depth: None,
                    observations: vec![*obs],
                });
        }
    }

    /// Drops tracks whose newest observation predates `oldest_frame`.
    pub fn retire_unseen(&mut self, oldest_frame: usize) {
        self.tracks.retain(|_, t| t.last_frame() >= oldest_frame);
    }

    /// Removes a track entirely (e.g. when its anchor is marginalized).
    pub fn remove(&mut self, feature_id: u64) -> Option<FeatureTrack> {
        self.tracks.remove(&feature_id)
    }

    /// Drops all observations taken at `frame_index`. Tracks anchored there
    /// are re-anchored to their next observation and lose their depth (it is
    /// re-triangulated on demand); emptied tracks are removed.
    pub fn drop_frame_observations(&mut self, frame_index: usize) {
        let mut to_remove = Vec::new();
        for (id, track) in self.tracks.iter_mut() {
            let had_anchor = track.anchor_frame == frame_index;
            track.observations.retain(|o| o.frame_index != frame_index);
            if track.observations.is_empty() {
                to_remove.push(*id);
                continue;
            }
            if had_anchor {
                track.anchor_frame = track.observations[0].frame_index;
                track.inverse_depth = None;
            }
        }
        for id in to_remove {
            self.tracks.remove(&id);
        }
    }

    pub fn get(&self, feature_id: u64) -> Option<&FeatureTrack> {
        self.tracks.get(&feature_id)
    }

    pub fn get_mut(&mut self, feature_id: u64) -> Option<&mut FeatureTrack> {
        self.tracks.get_mut(&feature_id)
    }

    /// Tracks in ascending feature-id order (deterministic iteration).
    pub fn iter(&self) -> impl Iterator<Item = &FeatureTrack> {
        self.tracks.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut FeatureTrack> {
        self.tracks.values_mut()
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }
}

/// Linear inverse-depth triangulation of a track along its anchor ray.
///
/// `body_poses` maps frame index to the body pose. Requires at least two
/// observations and rotation-compensated parallax of `min_parallax_px`.
pub fn triangulate(
    track: &FeatureTrack,
    body_poses: &BTreeMap<usize, Pose>,
    cam: &CameraModel,
    min_parallax_px: f64,
) -> Result<f64, VisionError> {
    let anchor_obs = track.anchor_observation();
    debug_assert_eq!(anchor_obs.frame_index, track.anchor_frame);
    let anchor_pose = match body_poses.get(&track.anchor_frame) {
        Some(p) => cam.camera_pose_in_world(p),
        None => return Err(VisionError::TooFewObservations(0)),
    };
    let ray = cam.back_project(&anchor_obs.pixel);

    let mut ata = 0.0;
    let mut atb = 0.0;
    let mut max_parallax: f64 = 0.0;
    let mut used = 0usize;
    for obs in &track.observations {
        if obs.frame_index == track.anchor_frame {
            continue;
        }
        let Some(pose) = body_poses.get(&obs.frame_index) else { continue };
        let obs_cam = cam.camera_pose_in_world(pose);
        // point at depth d on the anchor ray, in the observer camera:
        // p(d) = A d + c
        let rel = obs_cam.inverse().compose(&anchor_pose);
        let a = rel.rotation.rotate(&ray);
        let c = rel.translation;

        // rotation-compensated parallax: where the ray lands at infinity
        if a.z > MIN_DEPTH {
            let inf_px = Vector2::new(
                cam.fx * a.x / a.z + cam.cx,
                cam.fy * a.y / a.z + cam.cy,
            );
            max_parallax = max_parallax.max((inf_px - obs.pixel).norm());
        } else {
            max_parallax = f64::INFINITY;
        }

        let n = cam.back_project(&obs.pixel);
        let eq = [(a.x - n.x * a.z, n.x * c.z - c.x), (a.y - n.y * a.z, n.y * c.z - c.y)];
        for (coef, rhs) in eq {
            ata += coef * coef;
            atb += coef * rhs;
        }
        used += 1;
    }

    if used == 0 {
        return Err(VisionError::TooFewObservations(1));
    }
    if max_parallax < min_parallax_px {
        return Err(VisionError::LowParallax { max_px: max_parallax });
    }
    let depth = atb / ata;
    if !(depth > MIN_DEPTH) || !depth.is_finite() {
        return Err(VisionError::NonPositiveDepth(depth));
    }
    Ok(1.0 / depth)
}

/// Reprojection residual of one observation against the track's anchor.
///
/// Residual is predicted minus observed pixel. Jacobians are w.r.t. the
/// anchor state, the observer state (both 15-dim, right perturbation) and the
/// inverse depth. Fails when the point lands behind either camera.
pub fn reprojection_residual(
    anchor_state: &BodyState,
    observer_state: &BodyState,
    inverse_depth: f64,
    anchor_pixel: &Vector2<f64>,
    obs_pixel: &Vector2<f64>,
    cam: &CameraModel,
) -> Result<(Vector2<f64>, ReprojJacobian, ReprojJacobian, Vector2<f64>), VisionError> {
    if !(inverse_depth > 0.0) {
        return Err(VisionError::InvalidInverseDepth(inverse_depth));
    }
    let ray = cam.back_project(anchor_pixel);
    let p_ca = ray / inverse_depth;

    let r_bc = cam.body_from_camera.rotation.rotation_matrix();
    let t_bc = cam.body_from_camera.translation;
    let r_a = anchor_state.orientation.rotation_matrix();
    let r_j_t = observer_state.orientation.rotation_matrix().transpose();

    let p_ba = r_bc * p_ca + t_bc; // in anchor body
    let p_w = r_a * p_ba + anchor_state.position;
    let p_bj = r_j_t * (p_w - observer_state.position);
    let p_cj = r_bc.transpose() * (p_bj - t_bc);

    if p_cj.z < MIN_DEPTH {
        return Err(VisionError::PointBehindCamera(p_cj.z));
    }

    let (x, y, z) = (p_cj.x, p_cj.y, p_cj.z);
    let predicted = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
    let residual = predicted - obs_pixel;

    let dpi = Matrix2x3::new(
        cam.fx / z, 0.0, -cam.fx * x / (z * z),
        0.0, cam.fy / z, -cam.fy * y / (z * z),
    );
    let dcj = dpi * r_bc.transpose(); // through p_bj

    let mut j_obs = ReprojJacobian::zeros();
    j_obs.fixed_view_mut::<2, 3>(0, DP).copy_from(&(-(dcj * r_j_t)));
    j_obs.fixed_view_mut::<2, 3>(0, DTHETA).copy_from(&(dcj * skew(&p_bj)));

    let dworld = dcj * r_j_t; // through p_w
    let mut j_anchor = ReprojJacobian::zeros();
    j_anchor.fixed_view_mut::<2, 3>(0, DP).copy_from(&dworld);
    j_anchor
        .fixed_view_mut::<2, 3>(0, DTHETA)
        .copy_from(&(-(dworld * r_a * skew(&p_ba))));

    let dlambda = dworld * r_a * r_bc * (-ray / (inverse_depth * inverse_depth));

    Ok((residual, j_anchor, j_obs, dlambda))
}

/// Huber weight on a whitened residual norm: 1 inside the delta, delta/norm
/// outside. Multiplying residual and Jacobian by sqrt(w) implements the
/// robust cost in Gauss-Newton form.
pub fn huber_weight(whitened_norm: f64, delta: f64) -> f64 {
    if whitened_norm <= delta {
        1.0
    } else {
        delta / whitened_norm
    }
}

#[allow(unused_imports)]
pub(crate) use test_support::*;

mod test_support {
    #![allow(dead_code)]
    use super::*;

    /// Projects a world landmark into the camera at a body pose, noiseless.
    /// Shared by the simulator and the tests.
    pub fn observe_landmark(
        cam: &CameraModel,
        body_pose: &Pose,
        landmark: &Vector3<f64>,
    ) -> Option<Vector2<f64>> {
        cam.project(&cam.world_to_camera(body_pose, landmark))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{boxplus, quat_exp, StateDelta};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn cam() -> CameraModel {
        CameraModel::forward_vga()
    }

    fn state_at(position: Vector3<f64>, rotvec: Vector3<f64>, t: f64) -> BodyState {
        let mut s = BodyState::new(t);
        s.position = position;
        s.orientation = quat_exp(&rotvec);
        s
    }

    #[test]
    fn camera_axes_match_convention() {
        let c = cam();
        // optical axis (camera z) points along body +x
        let axis = c.body_from_camera.rotation.rotate(&Vector3::z());
        assert_relative_eq!(axis, Vector3::x(), epsilon = 1e-12);
        // image x (camera x) along body -y
        let ix = c.body_from_camera.rotation.rotate(&Vector3::x());
        assert_relative_eq!(ix, -Vector3::y(), epsilon = 1e-12);
    }

    #[test]
    fn track_update_bookkeeping() {
        let mut store = TrackStore::new();
        // empty frame: nothing happens
        store.update(0, &[]);
        assert!(store.is_empty());

        // 50 persistent ids over 5 frames -> 50 tracks of length 5
        for frame in 0..5 {
            let obs: Vec<FeatureObservation> = (0..50)
                .map(|id| FeatureObservation {
                    feature_id: id,
                    frame_index: frame,
                    pixel: Vector2::new(id as f64, frame as f64),
                })
                .collect();
            store.update(frame, &obs);
        }
        assert_eq!(store.len(), 50);
        assert!(store.iter().all(|t| t.observations.len() == 5 && t.anchor_frame == 0));
    }

    #[test]
    fn gappy_ids_match_counting_oracle() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(77);
        let mut store = TrackStore::new();
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for frame in 0..20 {
            let mut obs = Vec::new();
            for id in 0..30u64 {
                if rng.gen_bool(0.6) {
                    obs.push(FeatureObservation {
                        feature_id: id,
                        frame_index: frame,
                        pixel: Vector2::new(1.0, 2.0),
                    });
                    *counts.entry(id).or_default() += 1;
                }
            }
            store.update(frame, &obs);
        }
        for (id, n) in counts {
            assert_eq!(store.get(id).unwrap().observations.len(), n, "id {id}");
        }
    }

    #[test]
    fn retire_drops_stale_tracks() {
        let mut store = TrackStore::new();
        store.update(
            0,
            &[FeatureObservation { feature_id: 1, frame_index: 0, pixel: Vector2::zeros() }],
        );
        store.update(
            5,
            &[FeatureObservation { feature_id: 2, frame_index: 5, pixel: Vector2::zeros() }],
        );
        store.retire_unseen(3);
        assert!(store.get(1).is_none());
        assert!(store.get(2).is_some());
    }

    fn track_from_obs(
        landmark: &Vector3<f64>,
        poses: &[(usize, Pose)],
        cam: &CameraModel,
    ) -> Option<FeatureTrack> {
        let mut observations = Vec::new();
        for (frame, pose) in poses {
            let px = observe_landmark(cam, pose, landmark)?;
            observations.push(FeatureObservation {
                feature_id: 9,
                frame_index: *frame,
                pixel: px,
            });
        }
        Some(FeatureTrack {
            feature_id: 9,
            anchor_frame: poses[0].0,
            inverse_depth: None,
            observations,
        })
    }

    #[test]
    fn triangulates_known_depth() {
        let c = cam();
        // landmark 5 m ahead of the anchor camera, 0.2 m lateral baseline
        let landmark = Vector3::new(5.0 + c.body_from_camera.translation.x, 0.3, 0.1);
        let poses = vec![
            (0usize, Pose::identity()),
            (1usize, Pose::new(UnitQuat::identity(), Vector3::new(0.0, 0.2, 0.0))),
        ];
        let mut bp = BTreeMap::new();
        for (f, p) in &poses {
            bp.insert(*f, *p);
        }
        let track = track_from_obs(&landmark, &poses, &c).unwrap();
        let lambda = triangulate(&track, &bp, &c, 1.0).unwrap();
        assert_relative_eq!(lambda, 0.2, epsilon = 1e-6);
    }

    #[test]
    fn zero_baseline_reports_low_parallax() {
        let c = cam();
        let landmark = Vector3::new(4.0, 0.0, 0.2);
        let poses = vec![(0usize, Pose::identity()), (1usize, Pose::identity())];
        let mut bp = BTreeMap::new();
        for (f, p) in &poses {
            bp.insert(*f, *p);
        }
        let track = track_from_obs(&landmark, &poses, &c).unwrap();
        assert!(matches!(
            triangulate(&track, &bp, &c, 1.0),
            Err(VisionError::LowParallax { .. })
        ));
    }

    #[test]
    fn recovers_random_landmark_depths() {
        let c = cam();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..10 {
            let landmark = Vector3::new(
                rng.gen_range(3.0..8.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.5..0.5),
            );
            let poses: Vec<(usize, Pose)> = (0..4)
                .map(|k| {
                    (
                        k,
                        Pose::new(
                            quat_exp(&Vector3::new(0.0, 0.0, 0.02 * k as f64)),
                            Vector3::new(0.1 * k as f64, 0.15 * k as f64, 0.01 * k as f64),
                        ),
                    )
                })
                .collect();
            let mut bp = BTreeMap::new();
            for (f, p) in &poses {
                bp.insert(*f, *p);
            }
            let Some(track) = track_from_obs(&landmark, &poses, &c) else { continue };
            let lambda = triangulate(&track, &bp, &c, 1.0).unwrap();
            // ground-truth inverse depth in the anchor camera
            let anchor_cam = c.camera_pose_in_world(&poses[0].1);
            let depth_gt = anchor_cam.inverse().transform(&landmark).z;
            assert!(
                (1.0 / lambda - depth_gt).abs() < 1e-5,
                "depth {} vs {}",
                1.0 / lambda,
                depth_gt
            );
        }
    }

    #[test]
    fn residual_zero_at_ground_truth() {
        let c = cam();
        let landmark = Vector3::new(6.0, -0.4, 0.3);
        let anchor = state_at(Vector3::zeros(), Vector3::zeros(), 0.0);
        let obs_state = state_at(Vector3::new(0.3, 0.2, -0.05), Vector3::new(0.02, -0.03, 0.1), 0.1);
        let a_px = observe_landmark(&c, &anchor.pose(), &landmark).unwrap();
        let o_px = observe_landmark(&c, &obs_state.pose(), &landmark).unwrap();
        let anchor_cam = c.camera_pose_in_world(&anchor.pose());
        let lambda = 1.0 / anchor_cam.inverse().transform(&landmark).z;
        let (r, _, _, _) =
            reprojection_residual(&anchor, &obs_state, lambda, &a_px, &o_px, &c).unwrap();
        assert!(r.norm() < 1e-9, "residual {}", r.norm());
    }

    #[test]
    fn observation_shift_is_additive() {
        let c = cam();
        let landmark = Vector3::new(5.0, 0.2, -0.1);
        let anchor = state_at(Vector3::zeros(), Vector3::zeros(), 0.0);
        let obs_state = state_at(Vector3::new(0.2, 0.1, 0.0), Vector3::zeros(), 0.1);
        let a_px = observe_landmark(&c, &anchor.pose(), &landmark).unwrap();
        let o_px = observe_landmark(&c, &obs_state.pose(), &landmark).unwrap();
        let anchor_cam = c.camera_pose_in_world(&anchor.pose());
        let lambda = 1.0 / anchor_cam.inverse().transform(&landmark).z;
        let (r0, _, _, _) =
            reprojection_residual(&anchor, &obs_state, lambda, &a_px, &o_px, &c).unwrap();
        let shifted = o_px + Vector2::new(2.0, 0.0);
        let (r1, _, _, _) =
            reprojection_residual(&anchor, &obs_state, lambda, &a_px, &shifted, &c).unwrap();
        assert_relative_eq!(r1.x - r0.x, -2.0, epsilon = 1e-12);
        assert_relative_eq!(r1.y, r0.y, epsilon = 1e-12);
    }

    #[test]
    fn cheirality_violation_detected() {
        let c = cam();
        let anchor = state_at(Vector3::zeros(), Vector3::zeros(), 0.0);
        // observer turned 180 degrees: the point is behind it
        let obs_state =
            state_at(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, std::f64::consts::PI), 0.1);
        let r = reprojection_residual(
            &anchor,
            &obs_state,
            0.25,
            &Vector2::new(320.0, 240.0),
            &Vector2::new(320.0, 240.0),
            &c,
        );
        assert!(matches!(r, Err(VisionError::PointBehindCamera(_))));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let c = cam();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(19);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let anchor = state_at(
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.3..0.3),
                ),
                Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-3.0..3.0),
                ),
                0.0,
            );
            let obs_state = state_at(
                anchor.position
                    + Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.2..0.2),
                    ),
                Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-3.0..3.0),
                ),
                0.1,
            );
            let lambda = rng.gen_range(0.1..0.8);
            let a_px = Vector2::new(rng.gen_range(50.0..590.0), rng.gen_range(50.0..430.0));
            let o_px = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let Ok((_, ja, jo, jl)) =
                reprojection_residual(&anchor, &obs_state, lambda, &a_px, &o_px, &c)
            else {
                continue;
            };

            let eval = |a: &BodyState, o: &BodyState, l: f64| {
                reprojection_residual(a, o, l, &a_px, &o_px, &c).map(|(r, _, _, _)| r)
            };
            let mut ok = true;
            for col in 0..STATE_DIM {
                let mut d = StateDelta::zeros();
                d[col] = h;
                let (Ok(rpa), Ok(rma)) =
                    (eval(&boxplus(&anchor, &d), &obs_state, lambda), {
                        d[col] = -h;
                        eval(&boxplus(&anchor, &d), &obs_state, lambda)
                    })
                else {
                    ok = false;
                    break;
                };
                let fd = (rpa - rma) / (2.0 * h);
                assert!(
                    (ja.column(col) - fd).norm() <= 1e-5 * fd.norm().max(1.0),
                    "anchor col {col}: {} vs {fd}",
                    ja.column(col)
                );
                d[col] = h;
                let (Ok(rpo), Ok(rmo)) = (eval(&anchor, &boxplus(&obs_state, &d), lambda), {
                    d[col] = -h;
                    eval(&anchor, &boxplus(&obs_state, &d), lambda)
                }) else {
                    ok = false;
                    break;
                };
                let fd = (rpo - rmo) / (2.0 * h);
                assert!(
                    (jo.column(col) - fd).norm() <= 1e-5 * fd.norm().max(1.0),
                    "observer col {col}"
                );
            }
            if !ok {
                continue;
            }
            let (Ok(rpl), Ok(rml)) =
                (eval(&anchor, &obs_state, lambda + h), eval(&anchor, &obs_state, lambda - h))
            else {
                continue;
            };
            let fd = (rpl - rml) / (2.0 * h);
            assert!((jl - fd).norm() <= 1e-5 * fd.norm().max(1.0), "lambda: {jl} vs {fd}");
            checked += 1;
        }
    }

    #[test]
    fn residual_invariant_under_world_transform() {
        let c = cam();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(29);
        for _ in 0..20 {
            let anchor = state_at(
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0),
                Vector3::new(0.05, -0.02, rng.gen_range(-1.0..1.0)),
                0.0,
            );
            let obs_state = state_at(
                anchor.position + Vector3::new(0.3, 0.2, 0.05),
                Vector3::new(-0.03, 0.01, rng.gen_range(-1.0..1.0)),
                0.1,
            );
            let lambda = rng.gen_range(0.15..0.5);
            let a_px = Vector2::new(rng.gen_range(100.0..540.0), rng.gen_range(100.0..380.0));
            let o_px = Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
            let Ok((r0, _, _, _)) =
                reprojection_residual(&anchor, &obs_state, lambda, &a_px, &o_px, &c)
            else {
                continue;
            };
            let t = Pose::new(
                quat_exp(&Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )),
                Vector3::new(rng.gen_range(-5.0..5.0), 2.0, -1.0),
            );
            let map = |s: &BodyState| {
                let mut out = *s;
                out.position = t.transform(&s.position);
                out.orientation = t.rotation.compose(&s.orientation);
                out
            };
            let (r1, _, _, _) =
                reprojection_residual(&map(&anchor), &map(&obs_state), lambda, &a_px, &o_px, &c)
                    .unwrap();
            assert!((r1 - r0).norm() < 1e-9, "gauge violation {}", (r1 - r0).norm());
        }
    }

    #[test]
    fn huber_weight_behaviour() {
        assert_eq!(huber_weight(0.5, 1.5), 1.0);
        assert_relative_eq!(huber_weight(3.0, 1.5), 0.5);
    }
}
