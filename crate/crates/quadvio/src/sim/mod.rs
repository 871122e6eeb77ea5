//! Synthetic quadruped gait simulator.
//!
//! Generates analytic ground truth for a trot along square, circular, or
//! figure-8 paths with a parameterized walking-motion (wobble) amplitude,
//! then synthesizes IMU, joint encoder, contact, and feature-observation
//! streams at configurable rates and noise levels. All derivatives come from
//! jet arithmetic, so noiseless sensor streams integrate back to the ground
//! truth to machine precision.

mod gait;
mod jet;
mod path;

pub use gait::GaitSchedule;
pub use jet::Jet;
pub use path::{PathKind, PathModel};

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use thiserror::Error;

use crate::dataset::{CamRecord, Dataset, DatasetHeader, GtRecord, JointRecord, ObsRecord};
use crate::geometry::{BodyState, Pose, UnitQuat};
use crate::imu::{ImuNoise, ImuSample};
use crate::leg::{inverse_kinematics, LegError, LegId, LegModel};
use crate::vision::CameraModel;

pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("inverse kinematics out of workspace for {leg} at t = {t:.3} s")]
    IkOutOfWorkspace { leg: &'static str, t: f64 },
}

/// Controller-style presets differing only in walking-motion amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WobblePreset {
    /// Compliant controller: small sway and roll/pitch oscillation.
    Smooth,
    /// Predictive controller: markedly larger walking motion.
    Aggressive,
}

impl WobblePreset {
    pub fn name(&self) -> &'static str {
        match self {
            WobblePreset::Smooth => "smooth",
            WobblePreset::Aggressive => "aggressive",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "smooth" => Some(WobblePreset::Smooth),
            "aggressive" => Some(WobblePreset::Aggressive),
            _ => None,
        }
    }

    /// (lateral sway m, roll/pitch rad)
    pub fn amplitudes(&self) -> (f64, f64) {
        match self {
            WobblePreset::Smooth => (0.01, 0.01),
            WobblePreset::Aggressive => (0.04, 0.05),
        }
    }
}

/// Everything the simulator needs to produce one dataset.
#[derive(Debug, Clone)]
pub struct GaitConfig {
    pub path: PathKind,
    /// Path size (m): side length, radius, or long-axis width.
    pub path_scale: f64,
    /// Nominal speed along the path (m/s).
    pub speed: f64,
    /// Run length (s).
    pub duration: f64,
    /// Gait cycle period (s).
    pub gait_period: f64,
    /// Stance fraction of the cycle, in (0.5, 1).
    pub duty_factor: f64,
    /// Peak lateral sway of the body per cycle (m).
    pub sway_amplitude: f64,
    /// Peak roll/pitch oscillation (rad).
    pub roll_pitch_amplitude: f64,
    /// Nominal body height above ground (m).
    pub body_height: f64,
    /// Swing apex height (m).
    pub swing_height: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub encoder_rate: f64,
    pub imu_noise: ImuNoise,
    pub encoder_noise_std: f64,
    /// Image noise growth per pixel of inter-frame feature motion, modeling
    /// motion blur and tracking degradation under fast image motion.
    pub blur_gain: f64,
    /// Probability that a visible feature is dropped in a frame.
    pub feature_dropout: f64,
    /// Probability that a contact flag is flipped (stress testing).
    pub contact_corruption: f64,
    pub landmark_count: usize,
    /// Lateral corridor band (min, max) distance from the path (m).
    pub landmark_lateral: (f64, f64),
    /// Landmark height band (min, max) above ground (m).
    pub landmark_height: (f64, f64),
    pub camera: CameraModel,
    pub legs: [LegModel; 4],
    pub seed: u64,
}

impl GaitConfig {
    pub fn preset(path: PathKind, preset: WobblePreset, seed: u64) -> GaitConfig {
        let (sway, rp) = preset.amplitudes();
        GaitConfig {
            path,
            path_scale: path.default_scale(),
            speed: 0.5,
            duration: 60.0,
            gait_period: 0.8,
            duty_factor: 0.6,
            sway_amplitude: sway,
            roll_pitch_amplitude: rp,
            body_height: 0.4,
            swing_height: 0.06,
            imu_rate: 100.0,
            cam_rate: 20.0,
            encoder_rate: 100.0,
            imu_noise: ImuNoise::consumer_grade(),
            encoder_noise_std: 0.002,
            blur_gain: 0.05,
            feature_dropout: 0.05,
            contact_corruption: 0.0,
            landmark_count: 300,
            landmark_lateral: (2.5, 5.0),
            landmark_height: (0.3, 2.8),
            camera: CameraModel::forward_vga(),
            legs: crate::leg::standard_legs(),
            seed,
        }
    }

    /// Zeroes every noise source; the streams then equal the analytic truth.
    pub fn noiseless(mut self) -> Self {
        self.imu_noise = ImuNoise {
            accel_noise: 0.0,
            gyro_noise: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias_walk: 0.0,
        };
        self.encoder_noise_std = 0.0;
        self.camera.pixel_noise_std = 0.0;
        self.feature_dropout = 0.0;
        self.contact_corruption = 0.0;
        self
    }

    /// Applies `key = value` overrides from a gait config file. Unknown keys
    /// are an error. `preset` sets both wobble amplitudes at once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), SimError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(SimError::InvalidConfig(format!(
                    "line {}: expected key = value",
                    no + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| SimError::InvalidConfig(format!("key '{key}': {what}"));
            let f = |v: &str| v.parse::<f64>().map_err(|_| bad("not a number"));
            match key {
                "path" => {
                    self.path = PathKind::from_name(value)
                        .ok_or_else(|| bad("expected square | circle | figure8"))?;
                    self.path_scale = self.path.default_scale();
                }
                "preset" => {
                    let preset = WobblePreset::from_name(value)
                        .ok_or_else(|| bad("expected smooth | aggressive"))?;
                    let (sway, rp) = preset.amplitudes();
                    self.sway_amplitude = sway;
                    self.roll_pitch_amplitude = rp;
                }
                "path_scale" => self.path_scale = f(value)?,
                "speed" => self.speed = f(value)?,
                "duration" => self.duration = f(value)?,
                "gait_period" => self.gait_period = f(value)?,
                "duty_factor" => self.duty_factor = f(value)?,
                "sway_amplitude" => self.sway_amplitude = f(value)?,
                "roll_pitch_amplitude" => self.roll_pitch_amplitude = f(value)?,
                "body_height" => self.body_height = f(value)?,
                "swing_height" => self.swing_height = f(value)?,
                "imu_rate" => self.imu_rate = f(value)?,
                "cam_rate" => self.cam_rate = f(value)?,
                "encoder_rate" => self.encoder_rate = f(value)?,
                "accel_noise" => self.imu_noise.accel_noise = f(value)?,
                "gyro_noise" => self.imu_noise.gyro_noise = f(value)?,
                "accel_bias_walk" => self.imu_noise.accel_bias_walk = f(value)?,
                "gyro_bias_walk" => self.imu_noise.gyro_bias_walk = f(value)?,
                "encoder_noise" => self.encoder_noise_std = f(value)?,
                "pixel_noise" => self.camera.pixel_noise_std = f(value)?,
                "blur_gain" => self.blur_gain = f(value)?,
                "feature_dropout" => self.feature_dropout = f(value)?,
                "contact_corruption" => self.contact_corruption = f(value)?,
                "landmark_count" => {
                    self.landmark_count =
                        value.parse().map_err(|_| bad("not an integer"))?;
                }
                "seed" => self.seed = value.parse().map_err(|_| bad("not an integer"))?,
                other => {
                    return Err(SimError::InvalidConfig(format!("unknown key '{other}'")))
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duty_factor > 0.5 && self.duty_factor < 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "duty factor {} must lie in (0.5, 1)",
                self.duty_factor
            )));
        }
        for (name, rate) in [
            ("imu", self.imu_rate),
            ("cam", self.cam_rate),
            ("encoder", self.encoder_rate),
        ] {
            if !(rate > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} rate must be positive")));
            }
        }
        if !(self.duration > 0.0 && self.speed >= 0.0 && self.gait_period > 0.0) {
            return Err(SimError::InvalidConfig("non-positive duration/speed/period".into()));
        }
        Ok(())
    }

    pub fn header(&self) -> DatasetHeader {
        DatasetHeader {
            version: crate::dataset::FORMAT_VERSION,
            camera: self.camera,
            legs: self.legs,
            encoder_noise_std: self.encoder_noise_std,
            imu_noise: self.imu_noise,
            gravity: GRAVITY,
            imu_rate: self.imu_rate,
            cam_rate: self.cam_rate,
            encoder_rate: self.encoder_rate,
        }
    }
}

/// Exact kinematic ground truth at one instant.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuat,
    pub velocity: Vector3<f64>,
    pub accel_world: Vector3<f64>,
    /// Body-frame angular rate (rad/s).
    pub omega_body: Vector3<f64>,
    /// What an ideal accelerometer reads: R^T (a - g).
    pub specific_force: Vector3<f64>,
    pub yaw: f64,
}

impl GroundTruth {
    pub fn body_state(&self) -> BodyState {
        BodyState {
            position: self.position,
            orientation: self.orientation,
            velocity: self.velocity,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            timestamp: self.timestamp,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation, self.position)
    }

    pub fn gt_record(&self) -> GtRecord {
        GtRecord {
            timestamp: self.timestamp,
            position: self.position,
            orientation: self.orientation,
            velocity: self.velocity,
        }
    }
}

/// Analytic body trajectory: smooth base path plus periodic wobble.
#[derive(Debug, Clone)]
pub enum Trajectory {
    Gait {
        path: PathModel,
        gait_period: f64,
        sway_amplitude: f64,
        roll_pitch_amplitude: f64,
        body_height: f64,
    },
    Static {
        pose: Pose,
    },
}

impl Trajectory {
    pub fn from_config(cfg: &GaitConfig) -> Trajectory {
        Trajectory::Gait {
            path: PathModel::new(cfg.path, cfg.path_scale, cfg.speed),
            gait_period: cfg.gait_period,
            sway_amplitude: cfg.sway_amplitude,
            roll_pitch_amplitude: cfg.roll_pitch_amplitude,
            body_height: cfg.body_height,
        }
    }

    pub fn static_pose(pose: Pose, _body_height: f64) -> Trajectory {
        Trajectory::Static { pose }
    }

    pub fn sample(&self, t: f64) -> GroundTruth {
        match self {
            Trajectory::Static { pose } => GroundTruth {
                timestamp: t,
                position: pose.translation,
                orientation: pose.rotation,
                velocity: Vector3::zeros(),
                accel_world: Vector3::zeros(),
                omega_body: Vector3::zeros(),
                specific_force: pose.rotation.rotation_matrix().transpose() * (-GRAVITY),
                yaw: crate::geometry::quat_log(&pose.rotation).z,
            },
            Trajectory::Gait {
                path,
                gait_period,
                sway_amplitude,
                roll_pitch_amplitude,
                body_height,
            } => {
                let tj = Jet::variable(t);
                let (x, y) = path.position(tj);
                // heading from the path tangent; valid through 2nd derivative
                let psi = y.derivative().atan2(&x.derivative());

                let phase = tj * (2.0 * std::f64::consts::PI / gait_period);
                let sway = phase.sin() * *sway_amplitude;
                let bob = ((phase * 2.0) + Jet::constant(0.7)).sin() * (0.3 * sway_amplitude);
                let roll = (phase + Jet::constant(0.25)).sin() * *roll_pitch_amplitude;
                let pitch = ((phase * 2.0) + Jet::constant(0.9)).sin()
                    * (0.8 * roll_pitch_amplitude);
                // trot gaits also oscillate in heading as the diagonal
                // support pairs alternate
                let yaw_wobble = (phase + Jet::constant(2.1)).sin() * (0.6 * roll_pitch_amplitude);

                // lateral unit normal of the heading
                let nx = -psi.sin();
                let ny = psi.cos();
                let px = x + sway * nx;
                let py = y + sway * ny;
                let pz = bob + Jet::constant(*body_height);

                let yaw = psi + yaw_wobble;
                let orientation = UnitQuat::from_euler_zyx(roll.f, pitch.f, yaw.f);
                // ZYX Euler rates to body angular velocity
                let (sr, cr) = roll.f.sin_cos();
                let (sp, cp) = pitch.f.sin_cos();
                let omega_body = Vector3::new(
                    roll.d1 - yaw.d1 * sp,
                    pitch.d1 * cr + yaw.d1 * cp * sr,
                    -pitch.d1 * sr + yaw.d1 * cp * cr,
                );

                let accel_world = Vector3::new(px.d2, py.d2, pz.d2);
                let rt = orientation.rotation_matrix().transpose();
                GroundTruth {
                    timestamp: t,
                    position: Vector3::new(px.f, py.f, pz.f),
                    orientation,
                    velocity: Vector3::new(px.d1, py.d1, pz.d1),
                    accel_world,
                    omega_body,
                    specific_force: rt * (accel_world - GRAVITY),
                    yaw: psi.f,
                }
            }
        }
    }
}

/// Landmarks on virtual walls and posts flanking the path.
#[derive(Debug, Clone)]
pub struct SimulatedWorld {
    pub landmarks: Vec<Vector3<f64>>,
}

impl SimulatedWorld {
    pub fn generate(cfg: &GaitConfig, path: &PathModel) -> SimulatedWorld {
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x57524c44));
        let mut landmarks = Vec::with_capacity(cfg.landmark_count);
        for _ in 0..cfg.landmark_count {
            let u = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let ((px, py), (nx, ny)) = path.point_and_normal(u);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let offset = rng.gen_range(cfg.landmark_lateral.0..cfg.landmark_lateral.1);
            let height = rng.gen_range(cfg.landmark_height.0..cfg.landmark_height.1);
            landmarks.push(Vector3::new(
                px + side * offset * nx,
                py + side * offset * ny,
                height,
            ));
        }
        SimulatedWorld { landmarks }
    }
}

fn nominal_foot(cfg: &GaitConfig, leg: LegId) -> Vector3<f64> {
    let model = cfg.legs.iter().find(|m| m.leg_id == leg).unwrap();
    Vector3::new(
        model.hip_offset.x,
        model.hip_offset.y + leg.side() * model.hip_length,
        0.0,
    )
}

/// Joint angles that put the foot at `foot_world` given the body pose.
fn joint_angles_for(
    model: &LegModel,
    body: &Pose,
    foot_world: &Vector3<f64>,
) -> Result<Vector3<f64>, LegError> {
    let foot_body = body.inverse().transform(foot_world);
    inverse_kinematics(model, &foot_body)
}

fn normal_draw(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Runs the full simulation: ground truth plus all sensor streams.
pub fn simulate(cfg: &GaitConfig) -> Result<Dataset, SimError> {
    cfg.validate()?;
    let trajectory = Trajectory::from_config(cfg);
    let path = PathModel::new(cfg.path, cfg.path_scale, cfg.speed);
    let schedule = GaitSchedule::new(
        &trajectory,
        cfg.gait_period,
        cfg.duty_factor,
        cfg.swing_height,
        &|leg| nominal_foot(cfg, leg),
        cfg.duration,
    );
    let world = SimulatedWorld::generate(cfg, &path);
    synthesize_sensors(cfg, &trajectory, &schedule, &world)
}

/// Synthesizes all sensor streams from an arbitrary trajectory and schedule.
pub fn synthesize_sensors(
    cfg: &GaitConfig,
    trajectory: &Trajectory,
    schedule: &GaitSchedule,
    world: &SimulatedWorld,
) -> Result<Dataset, SimError> {
    let mut ds = Dataset::empty(cfg.header());

    // IMU + GT on the IMU grid, with a bias random walk
    let mut imu_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x494d55));
    let dt = 1.0 / cfg.imu_rate;
    let sqrt_dt = dt.sqrt();
    let n_imu = (cfg.duration * cfg.imu_rate).round() as usize;
    let mut accel_bias = Vector3::zeros();
    let mut gyro_bias = Vector3::zeros();
    for k in 0..=n_imu {
        let t = k as f64 / cfg.imu_rate;
        let gt = trajectory.sample(t);
        ds.gt.push(gt.gt_record());
        let accel_noise = Vector3::new(
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
        ) * (cfg.imu_noise.accel_noise / sqrt_dt);
        let gyro_noise = Vector3::new(
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
        ) * (cfg.imu_noise.gyro_noise / sqrt_dt);
        ds.imu.push(ImuSample {
            timestamp: t,
            accel: gt.specific_force + accel_bias + accel_noise,
            gyro: gt.omega_body + gyro_bias + gyro_noise,
        });
        accel_bias += Vector3::new(
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
        ) * (cfg.imu_noise.accel_bias_walk * sqrt_dt);
        gyro_bias += Vector3::new(
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
            normal_draw(&mut imu_rng),
        ) * (cfg.imu_noise.gyro_bias_walk * sqrt_dt);
    }

    // joint encoders and contact flags
    let mut enc_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x454e43));
    let n_enc = (cfg.duration * cfg.encoder_rate).round() as usize;
    for k in 0..=n_enc {
        let t = k as f64 / cfg.encoder_rate;
        let gt = trajectory.sample(t);
        let body = gt.pose();
        for model in &cfg.legs {
            let leg = model.leg_id;
            let foot = schedule.foot_world(leg, t);
            let angles = joint_angles_for(model, &body, &foot)
                .map_err(|_| SimError::IkOutOfWorkspace { leg: leg.code(), t })?;
            let noisy = angles
                + Vector3::new(
                    normal_draw(&mut enc_rng),
                    normal_draw(&mut enc_rng),
                    normal_draw(&mut enc_rng),
                ) * cfg.encoder_noise_std;
            let mut contact = schedule.in_contact(leg, t);
            if cfg.contact_corruption > 0.0 && enc_rng.gen_bool(cfg.contact_corruption) {
                contact = !contact;
            }
            ds.joints.push(JointRecord { timestamp: t, leg, angles: noisy, contact });
        }
    }

    // camera frames and feature observations
    let mut obs_rng = ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x4f4253));
    let n_cam = (cfg.duration * cfg.cam_rate).round() as usize;
    let mut prev_pixels: BTreeMap<u64, Vector2<f64>> = BTreeMap::new();
    for frame in 0..=n_cam {
        let t = frame as f64 / cfg.cam_rate;
        let gt = trajectory.sample(t);
        let body = gt.pose();
        ds.cams.push(CamRecord { timestamp: t, frame_id: frame as u64 });
        let mut curr_pixels = BTreeMap::new();
        for (id, landmark) in world.landmarks.iter().enumerate() {
            let p_cam = cfg.camera.world_to_camera(&body, landmark);
            if p_cam.z > 20.0 {
                continue;
            }
            let Some(pixel) = cfg.camera.project(&p_cam) else { continue };
            let flow = prev_pixels
                .get(&(id as u64))
                .map(|prev| (pixel - prev).norm())
                .unwrap_or(0.0);
            curr_pixels.insert(id as u64, pixel);
            let sigma = cfg.camera.pixel_noise_std * (1.0 + cfg.blur_gain * flow);
            let noisy = pixel
                + Vector2::new(normal_draw(&mut obs_rng), normal_draw(&mut obs_rng)) * sigma;
            let dropped = cfg.feature_dropout > 0.0 && obs_rng.gen_bool(cfg.feature_dropout);
            if dropped {
                continue;
            }
            if noisy.x < 0.0
                || noisy.x >= cfg.camera.width as f64
                || noisy.y < 0.0
                || noisy.y >= cfg.camera.height as f64
            {
                continue;
            }
            ds.obs.push(ObsRecord {
                frame_id: frame as u64,
                feature_id: id as u64,
                pixel: noisy,
            });
        }
        prev_pixels = curr_pixels;
    }

    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_exp, quat_log};
    use approx::assert_relative_eq;

    fn smooth_cfg() -> GaitConfig {
        GaitConfig::preset(PathKind::Circle, WobblePreset::Smooth, 7)
    }

    #[test]
    fn circle_without_wobble_has_exact_angular_rate() {
        let mut cfg = smooth_cfg();
        cfg.sway_amplitude = 0.0;
        cfg.roll_pitch_amplitude = 0.0;
        let traj = Trajectory::from_config(&cfg);
        for &t in &[1.0, 7.3, 22.2] {
            let gt = traj.sample(t);
            assert_relative_eq!(gt.velocity.norm(), cfg.speed, epsilon = 1e-9);
            assert_relative_eq!(gt.omega_body.z, cfg.speed / cfg.path_scale, epsilon = 1e-9);
        }
    }

    #[test]
    fn doubling_wobble_doubles_peak_sway() {
        let mut cfg = smooth_cfg();
        cfg.roll_pitch_amplitude = 0.0;
        let peak = |sway: f64| {
            let mut c = cfg.clone();
            c.sway_amplitude = sway;
            let traj = Trajectory::from_config(&c);
            let base = Trajectory::from_config(&{
                let mut b = c.clone();
                b.sway_amplitude = 0.0;
                b
            });
            let mut max_off: f64 = 0.0;
            for k in 0..2000 {
                let t = 20.0 * k as f64 / 2000.0;
                let a = traj.sample(t);
                let b = base.sample(t);
                max_off = max_off.max((a.position - b.position).xy().norm());
            }
            max_off
        };
        let p1 = peak(0.02);
        let p2 = peak(0.04);
        assert_relative_eq!(p2 / p1, 2.0, max_relative = 1e-6);
        assert_relative_eq!(p1, 0.02, max_relative = 1e-3);
    }

    #[test]
    fn omega_body_matches_quaternion_derivative() {
        let cfg = GaitConfig::preset(PathKind::Figure8, WobblePreset::Aggressive, 1);
        let traj = Trajectory::from_config(&cfg);
        let h = 1e-6;
        for &t in &[0.5, 3.3, 9.9, 17.0] {
            let gt = traj.sample(t);
            let qm = traj.sample(t - h).orientation;
            let qp = traj.sample(t + h).orientation;
            let omega_fd = quat_log(&qm.inverse().compose(&qp)) / (2.0 * h);
            assert!(
                (omega_fd - gt.omega_body).norm() < 1e-6,
                "t={t}: {omega_fd:?} vs {:?}",
                gt.omega_body
            );
        }
    }

    #[test]
    fn velocity_and_accel_match_finite_differences() {
        let cfg = GaitConfig::preset(PathKind::Square, WobblePreset::Aggressive, 1);
        let traj = Trajectory::from_config(&cfg);
        let h = 1e-5;
        for k in 0..50 {
            let t = 1.0 + 40.0 * k as f64 / 50.0;
            let gt = traj.sample(t);
            let pm = traj.sample(t - h).position;
            let pp = traj.sample(t + h).position;
            let v_fd = (pp - pm) / (2.0 * h);
            let a_fd = (pp - 2.0 * gt.position + pm) / (h * h);
            assert!((v_fd - gt.velocity).norm() < 1e-7, "velocity at {t}");
            assert!((a_fd - gt.accel_world).norm() < 1e-3, "accel at {t}");
        }
    }

    #[test]
    fn static_imu_reads_gravity_reaction() {
        let cfg = smooth_cfg().noiseless();
        let traj = Trajectory::static_pose(Pose::identity(), 0.4);
        let gt = traj.sample(1.0);
        assert_relative_eq!(gt.specific_force, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
        assert_eq!(gt.omega_body, Vector3::zeros());
        let _ = cfg;
    }

    #[test]
    fn noiseless_sensors_equal_ground_truth() {
        let mut cfg = smooth_cfg().noiseless();
        cfg.duration = 2.0;
        cfg.landmark_count = 30;
        let traj = Trajectory::from_config(&cfg);
        let ds = simulate(&cfg).unwrap();
        for s in ds.imu.iter().step_by(17) {
            let gt = traj.sample(s.timestamp);
            assert!((s.accel - gt.specific_force).norm() < 1e-12);
            assert!((s.gyro - gt.omega_body).norm() < 1e-12);
        }
    }

    #[test]
    fn stance_feet_fixed_in_world() {
        let cfg = GaitConfig::preset(PathKind::Circle, WobblePreset::Aggressive, 3);
        let traj = Trajectory::from_config(&cfg);
        let sched = GaitSchedule::new(
            &traj,
            cfg.gait_period,
            cfg.duty_factor,
            cfg.swing_height,
            &|leg| nominal_foot(&cfg, leg),
            cfg.duration,
        );
        // sample one stance phase densely: world foot position constant
        for leg in LegId::ALL {
            let mut t = 2.0;
            while !sched.in_contact(leg, t) {
                t += 0.01;
            }
            let base = sched.foot_world(leg, t);
            let mut t2 = t;
            while sched.in_contact(leg, t2) {
                assert!((sched.foot_world(leg, t2) - base).norm() == 0.0);
                t2 += 0.005;
            }
        }
    }

    #[test]
    fn preintegrated_noiseless_imu_reproduces_ground_truth() {
        let mut cfg = GaitConfig::preset(PathKind::Circle, WobblePreset::Aggressive, 5).noiseless();
        cfg.duration = 3.0;
        cfg.imu_rate = 1000.0;
        cfg.landmark_count = 1;
        let ds = simulate(&cfg).unwrap();
        let traj = Trajectory::from_config(&cfg);
        // 0.5 s batch starting at 1.0 s
        let batch: Vec<ImuSample> = ds
            .imu
            .iter()
            .filter(|s| s.timestamp >= 1.0 - 1e-9 && s.timestamp <= 1.5 + 1e-9)
            .copied()
            .collect();
        let noise = ImuNoise::consumer_grade();
        let pre =
            crate::imu::integrate(&batch, &Vector3::zeros(), &Vector3::zeros(), &noise).unwrap();
        let si = traj.sample(1.0).body_state();
        let sj = traj.sample(1.5).body_state();
        let prop = crate::imu::propagate(&si, &pre, &GRAVITY);
        assert!(
            (prop.position - sj.position).norm() < 1e-5,
            "position error {}",
            (prop.position - sj.position).norm()
        );
        assert!((prop.velocity - sj.velocity).norm() < 1e-5);
        assert!(
            quat_log(&prop.orientation.inverse().compose(&sj.orientation)).norm() < 1e-6
        );
    }

    #[test]
    fn encoder_noise_std_matches_configuration() {
        let mut cfg = smooth_cfg();
        cfg.duration = 60.0;
        cfg.encoder_rate = 500.0;
        cfg.encoder_noise_std = 0.002;
        cfg.landmark_count = 1;
        cfg.cam_rate = 1.0;
        let noisy = simulate(&cfg).unwrap();
        let clean = simulate(&cfg.clone().noiseless()).unwrap();
        assert_eq!(noisy.joints.len(), clean.joints.len());
        let mut diffs = Vec::new();
        for (a, b) in noisy.joints.iter().zip(clean.joints.iter()) {
            for k in 0..3 {
                diffs.push(a.angles[k] - b.angles[k]);
            }
        }
        assert!(diffs.len() > 100_000, "want >= 1e5 samples, got {}", diffs.len());
        let n = diffs.len() as f64;
        let mean: f64 = diffs.iter().sum::<f64>() / n;
        let var: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - cfg.encoder_noise_std).abs() / cfg.encoder_noise_std < 0.05,
            "std {std} vs {}",
            cfg.encoder_noise_std
        );
    }

    #[test]
    fn same_seed_identical_dataset() {
        let mut cfg = GaitConfig::preset(PathKind::Figure8, WobblePreset::Smooth, 99);
        cfg.duration = 3.0;
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        crate::dataset::write_dataset(&a, &mut bytes_a).unwrap();
        crate::dataset::write_dataset(&b, &mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn feature_motion_responds_to_wobble() {
        // mean |d_i| at least 2x larger on the aggressive preset
        let mean_motion = |preset: WobblePreset| {
            let mut cfg = GaitConfig::preset(PathKind::Circle, preset, 11).noiseless();
            cfg.duration = 10.0;
            let ds = simulate(&cfg).unwrap();
            let mut prev: BTreeMap<u64, Vector2<f64>> = BTreeMap::new();
            let mut sum = 0.0;
            let mut count = 0;
            for cam in &ds.cams {
                let curr: BTreeMap<u64, Vector2<f64>> = ds
                    .observations_for_frame(cam.frame_id)
                    .iter()
                    .map(|o| (o.feature_id, o.pixel))
                    .collect();
                let m = crate::adaptive::frame_motion(&prev, &curr, cam.frame_id as usize);
                if m.is_valid() {
                    sum += m.displacement.norm();
                    count += 1;
                }
                prev = curr;
            }
            sum / count as f64
        };
        let smooth = mean_motion(WobblePreset::Smooth);
        let aggressive = mean_motion(WobblePreset::Aggressive);
        assert!(
            aggressive >= 2.0 * smooth,
            "aggressive {aggressive:.3} px vs smooth {smooth:.3} px"
        );
    }

    #[test]
    fn landmarks_stay_in_range_of_path() {
        let cfg = smooth_cfg();
        let path = PathModel::new(cfg.path, cfg.path_scale, cfg.speed);
        let world = SimulatedWorld::generate(&cfg, &path);
        assert_eq!(world.landmarks.len(), cfg.landmark_count);
        let traj = Trajectory::from_config(&cfg);
        // every landmark is within sensing range for at least 30% of frames
        let n_frames = 200;
        for lm in &world.landmarks {
            let mut in_range = 0;
            for k in 0..n_frames {
                let t = cfg.duration * k as f64 / n_frames as f64;
                let gt = traj.sample(t);
                if (lm - gt.position).norm() < 20.0 {
                    in_range += 1;
                }
            }
            assert!(in_range as f64 >= 0.3 * n_frames as f64);
        }
    }

    #[test]
    fn ik_failure_reported_for_unreachable_height() {
        let mut cfg = smooth_cfg();
        cfg.body_height = 0.9; // beyond leg reach
        cfg.duration = 1.0;
        assert!(matches!(simulate(&cfg), Err(SimError::IkOutOfWorkspace { .. })));
    }
}
