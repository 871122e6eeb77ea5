//! Sliding-window estimator: assembles the marginalization prior, IMU,
//! reprojection, and (optionally adaptive) leg kinematic factors over the
//! window and minimizes the total cost with damped Gauss-Newton on the
//! manifold.
//!
//! Window policy: every camera frame enters the window; once it is overfull
//! the newest frame's rotation-compensated parallax against its predecessor
//! decides between marginalizing the oldest frame (enough parallax) and
//! discarding the second-newest frame (otherwise). When a landmark's anchor
//! frame is marginalized its inverse depth is transferred to the next
//! observation frame, so tracks keep constraining the window while their
//! past observations live on inside the prior.

mod marginalize;

pub use marginalize::{schur_eliminate, MarginalizationPrior, MarginalizeError};

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::adaptive::{
    frame_motion, gamma_from_motions, AdaptiveFactor, FrameMotion, GammaConfig, ObservationMap,
};
use crate::dataset::{Dataset, DatasetHeader, GtRecord};
use crate::geometry::{
    boxplus, quat_log, right_jacobian_inv, BodyState, StateDelta, DBA, DBG, DP, DTHETA, DV,
    STATE_DIM,
};
use crate::imu::{integrate, sqrt_information, ImuError, ImuNoise, ImuSample, PreintegratedImu};
use crate::leg::{encoder_information, leg_residual, LegId, LegModel, LegSnapshot};
use crate::parallel::{map_ordered, Threading};
use crate::vision::{
    huber_weight, reprojection_residual, triangulate, CameraModel, FeatureObservation, TrackStore,
};

/// Floors applied to header noise values so information matrices stay finite
/// on noiseless datasets.
const MIN_ACCEL_NOISE: f64 = 1e-5;
const MIN_GYRO_NOISE: f64 = 1e-6;
const MIN_BIAS_WALK: f64 = 1e-9;
const MIN_ENCODER_STD: f64 = 1e-5;
const MIN_PIXEL_STD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("frame timestamp {t:.4} does not advance past {prev:.4}")]
    NonMonotonicFrame { prev: f64, t: f64 },
    #[error("sensor timestamp misaligned: {what} at {t:.4} vs frame {frame_t:.4}")]
    TimestampMisaligned { what: &'static str, t: f64, frame_t: f64 },
    #[error("IMU batch does not cover [{from:.4}, {to:.4}]")]
    MissingImuCoverage { from: f64, to: f64 },
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Marginalize(#[from] MarginalizeError),
    #[error("dataset has no camera frames")]
    EmptyDataset,
    #[error("no ground-truth record near the first frame for initialization")]
    NoInitialState,
    #[error("config: {0}")]
    Config(String),
}

/// Which estimator variant runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Camera + IMU only.
    Vio,
    /// Leg constraints with a fixed factor.
    VioLegFixed,
    /// Leg constraints with the walking-motion-adaptive factor.
    WalkVio,
}

impl EstimatorMode {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorMode::Vio => "vio",
            EstimatorMode::VioLegFixed => "vio-leg-fixed",
            EstimatorMode::WalkVio => "walk-vio",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "vio" => Some(EstimatorMode::Vio),
            "vio-leg-fixed" => Some(EstimatorMode::VioLegFixed),
            "walk-vio" => Some(EstimatorMode::WalkVio),
            _ => None,
        }
    }
}

/// How Gamma enters the leg factor; both are algebraically identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaApplication {
    /// Multiply the residual (and Jacobians) by Gamma.
    WeightedResidual,
    /// Fold Gamma into the information matrix as Gamma^T Omega Gamma.
    ReweightedInformation,
}

#[derive(Debug, Clone)]
pub struct WindowConfig {
    pub mode: EstimatorMode,
    /// Sliding-window size in frames, at least 3.
    pub window_size: usize,
    pub max_iterations: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop when the relative step norm falls below this.
    pub step_tolerance: f64,
    /// Stop when the accepted relative cost decrease falls below this.
    pub function_tolerance: f64,
    pub initial_lambda: f64,
    pub gamma: GammaConfig,
    /// Gamma for [`EstimatorMode::VioLegFixed`].
    pub fixed_gamma: f64,
    pub gamma_application: GammaApplication,
    pub huber_delta_px: f64,
    /// Triangulation gate (px of rotation-compensated parallax).
    pub min_parallax_px: f64,
    /// Keyframe decision threshold for two-way marginalization (px).
    pub keyframe_parallax_px: f64,
    /// Vision terms whose whitened residual exceeds this at the start of a
    /// round sit the round out.
    pub outlier_gate_sigma: f64,
    /// Strong prior on the first pose's position and yaw.
    pub enable_gauge: bool,
    pub gauge_information: f64,
    pub threading: Threading,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::WalkVio,
            window_size: 10,
            max_iterations: 8,
            gradient_tolerance: 1e-8,
            step_tolerance: 1e-10,
            function_tolerance: 1e-6,
            initial_lambda: 1e-6,
            gamma: GammaConfig::default(),
            fixed_gamma: 1.0,
            gamma_application: GammaApplication::WeightedResidual,
            huber_delta_px: 1.5,
            min_parallax_px: 4.0,
            keyframe_parallax_px: 0.5,
            outlier_gate_sigma: 20.0,
            enable_gauge: true,
            gauge_information: 1e8,
            threading: Threading::default(),
        }
    }
}

impl WindowConfig {
    /// Parses the plain `key = value` estimator config text. Unknown keys
    /// are an error; missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<WindowConfig, EstimatorError> {
        let mut cfg = WindowConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(EstimatorError::Config(format!("line {}: expected key = value", no + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| EstimatorError::Config(format!("key '{key}': {what}"));
            let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("not a number"));
            match key {
                "mode" => {
                    cfg.mode = EstimatorMode::from_name(value)
                        .ok_or_else(|| bad("expected vio | vio-leg-fixed | walk-vio"))?;
                }
                "window_size" => {
                    cfg.window_size =
                        value.parse().map_err(|_| bad("not an integer"))?;
                }
                "max_iterations" => {
                    cfg.max_iterations = value.parse().map_err(|_| bad("not an integer"))?;
                }
                "gradient_tolerance" => cfg.gradient_tolerance = parse_f64(value)?,
                "step_tolerance" => cfg.step_tolerance = parse_f64(value)?,
                "function_tolerance" => cfg.function_tolerance = parse_f64(value)?,
                "initial_lambda" => cfg.initial_lambda = parse_f64(value)?,
                "sigma_ref_sq" => cfg.gamma.sigma_ref_sq = parse_f64(value)?,
                "gamma_min" => cfg.gamma.gamma_min = parse_f64(value)?,
                "gamma_max" => cfg.gamma.gamma_max = parse_f64(value)?,
                "fixed_gamma" => cfg.fixed_gamma = parse_f64(value)?,
                "huber_delta_px" => cfg.huber_delta_px = parse_f64(value)?,
                "min_parallax_px" => cfg.min_parallax_px = parse_f64(value)?,
                "keyframe_parallax_px" => cfg.keyframe_parallax_px = parse_f64(value)?,
                "outlier_gate_sigma" => cfg.outlier_gate_sigma = parse_f64(value)?,
                other => return Err(EstimatorError::Config(format!("unknown key '{other}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if self.window_size < 3 {
            return Err(EstimatorError::Config("window_size must be at least 3".into()));
        }
        Ok(())
    }
}

/// One frame of sensor input handed to the estimator.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub timestamp: f64,
    /// IMU samples covering [previous frame, this frame]; empty for the
    /// first frame.
    pub imu_batch: Vec<ImuSample>,
    pub legs: Vec<LegSnapshot>,
    /// (feature id, pixel) observations of this frame.
    pub observations: Vec<(u64, Vector2<f64>)>,
}

/// Online estimate of one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameEstimate {
    pub frame_index: usize,
    pub state: BodyState,
}

impl FrameEstimate {
    pub fn gt_record(&self) -> GtRecord {
        GtRecord {
            timestamp: self.state.timestamp,
            position: self.state.position,
            orientation: self.state.orientation,
            velocity: self.state.velocity,
        }
    }
}

/// Reason the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientSmall,
    StepSmall,
    FunctionSmall,
    MaxIterations,
    Stalled,
}

/// Per-round cost split by factor type (whitened squared norms).
#[derive(Debug, Clone, Copy, Default)]
pub struct TermCosts {
    pub prior: f64,
    pub gauge: f64,
    pub imu: f64,
    pub vision: f64,
    pub leg: f64,
}

#[derive(Debug, Clone)]
pub struct RoundDiagnostics {
    pub frame_index: usize,
    pub timestamp: f64,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub gradient_norm: f64,
    pub stop: StopReason,
    pub gamma_eigenvalues: [f64; 3],
    pub gamma_unclamped: [f64; 3],
    pub term_costs: TermCosts,
    pub num_imu_factors: usize,
    pub num_leg_factors: usize,
    pub num_vision_factors: usize,
    pub window_len: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EstimatorOutput {
    pub estimates: Vec<FrameEstimate>,
    pub rounds: Vec<RoundDiagnostics>,
}

impl EstimatorOutput {
    pub fn trajectory(&self) -> Vec<GtRecord> {
        self.estimates.iter().map(FrameEstimate::gt_record).collect()
    }
}

/// Initial-state anchor: an infinite-information prior would over-constrain
/// the observable directions, so the unobservable gauge directions (position,
/// yaw) get the strong information from the config while velocity,
/// roll/pitch, and the biases get finite sigmas matching the bootstrap
/// uncertainty of the ground-truth initializer.
#[derive(Debug, Clone)]
struct GaugeAnchor {
    frame_index: usize,
    state: BodyState,
}

/// 1-sigma bootstrap uncertainties for the finite part of the anchor.
const INIT_VEL_STD: f64 = 0.05;
const INIT_ROLL_PITCH_STD: f64 = 0.02;
const INIT_ACCEL_BIAS_STD: f64 = 0.1;
const INIT_GYRO_BIAS_STD: f64 = 0.01;

#[derive(Debug, Clone)]
struct Frame {
    frame_index: usize,
    timestamp: f64,
    state: BodyState,
    /// Raw batch covering the interval from the previous window frame.
    imu_batch: Vec<ImuSample>,
    preint: Option<PreintegratedImu>,
    legs: BTreeMap<LegId, LegSnapshot>,
    /// Per leg: contact held through the whole interval from the previous
    /// window frame (AND over any frames discarded in between).
    interval_contact: BTreeMap<LegId, bool>,
    obs: ObservationMap,
}

/// Parameter layout of one dense solve.
struct Layout {
    frame_offsets: Vec<Option<usize>>,
    lambda_offsets: BTreeMap<u64, usize>,
    dim: usize,
}

impl Layout {
    fn frame(&self, pos: usize) -> usize {
        self.frame_offsets[pos].expect("frame not in layout")
    }
}

/// One factor of the window cost, identified structurally.
#[derive(Debug, Clone, Copy)]
enum Factor {
    Prior,
    Gauge,
    Imu { interval: usize },
    Leg { interval: usize, leg: LegId },
    Vision { feature: u64, obs_pos: usize },
}

type Jac15 = nalgebra::SMatrix<f64, 15, 15>;
type Jac3 = nalgebra::SMatrix<f64, 3, 15>;
type Jac2 = nalgebra::SMatrix<f64, 2, 15>;

/// Whitened linearization of a factor. The measurement factors use
/// fixed-size blocks so assembly stays allocation-free; the prior and the
/// anchor keep dynamic blocks.
enum LinFactor {
    Dense {
        blocks: Vec<(usize, DMatrix<f64>)>,
        residual: DVector<f64>,
        kind: FactorKind,
    },
    Imu {
        offsets: (usize, usize),
        ji: Box<Jac15>,
        jj: Box<Jac15>,
        residual: StateDelta,
    },
    Leg {
        offsets: (usize, usize),
        ji: Jac3,
        jj: Jac3,
        residual: Vector3<f64>,
    },
    Vision {
        offsets: (usize, usize, usize),
        ja: Jac2,
        jo: Jac2,
        jl: Vector2<f64>,
        residual: Vector2<f64>,
    },
}

impl LinFactor {
    fn cost(&self) -> f64 {
        match self {
            LinFactor::Dense { residual, .. } => residual.norm_squared(),
            LinFactor::Imu { residual, .. } => residual.norm_squared(),
            LinFactor::Leg { residual, .. } => residual.norm_squared(),
            LinFactor::Vision { residual, .. } => residual.norm_squared(),
        }
    }

    fn kind(&self) -> FactorKind {
        match self {
            LinFactor::Dense { kind, .. } => *kind,
            LinFactor::Imu { .. } => FactorKind::Imu,
            LinFactor::Leg { .. } => FactorKind::Leg,
            LinFactor::Vision { .. } => FactorKind::Vision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FactorKind {
    Prior,
    Gauge,
    Imu,
    Vision,
    Leg,
}

/// Candidate point of the LM iteration.
#[derive(Clone)]
struct Candidate {
    states: Vec<BodyState>,
    lambdas: BTreeMap<u64, f64>,
}

#[derive(Default, Debug)]
struct PhaseTimers {
    assemble: f64,
    solve: f64,
    cost: f64,
    marginalize: f64,
    triangulate: f64,
    rounds: usize,
    iters: usize,
}

pub struct Estimator {
    config: WindowConfig,
    camera: CameraModel,
    legs: [LegModel; 4],
    imu_noise: ImuNoise,
    gravity: Vector3<f64>,
    frames: Vec<Frame>,
    tracks: TrackStore,
    prior: Option<MarginalizationPrior>,
    prior_hessian: Option<DMatrix<f64>>,
    gauge: Option<GaugeAnchor>,
    next_frame_index: usize,
    current_gamma: AdaptiveFactor,
    output: EstimatorOutput,
    initial_state: Option<BodyState>,
    timers: PhaseTimers,
}

impl Estimator {
    pub fn new(config: WindowConfig, header: &DatasetHeader, initial: BodyState) -> Estimator {
        let imu_noise = ImuNoise {
            accel_noise: header.imu_noise.accel_noise.max(MIN_ACCEL_NOISE),
            gyro_noise: header.imu_noise.gyro_noise.max(MIN_GYRO_NOISE),
            accel_bias_walk: header.imu_noise.accel_bias_walk.max(MIN_BIAS_WALK),
            gyro_bias_walk: header.imu_noise.gyro_bias_walk.max(MIN_BIAS_WALK),
        };
        let gauge = config.enable_gauge.then(|| GaugeAnchor { frame_index: 0, state: initial });
        let est = Estimator {
            config,
            camera: header.camera,
            legs: header.legs,
            imu_noise,
            gravity: header.gravity,
            frames: Vec::new(),
            tracks: TrackStore::new(),
            prior: None,
            prior_hessian: None,
            gauge,
            next_frame_index: 0,
            current_gamma: AdaptiveFactor::identity(),
            output: EstimatorOutput::default(),
            initial_state: Some(initial),
            timers: PhaseTimers::default(),
        };
        est
    }

    /// Feeds one camera frame with its sensor context; runs one optimization
    /// round and, if the window is overfull, the two-way marginalization.
    pub fn add_frame(&mut self, input: FrameInput) -> Result<(), EstimatorError> {
        let frame_index = self.next_frame_index;
        let is_first = self.frames.is_empty();
        if let Some(last) = self.frames.last() {
            if input.timestamp <= last.timestamp {
                return Err(EstimatorError::NonMonotonicFrame {
                    prev: last.timestamp,
                    t: input.timestamp,
                });
            }
        }
        for snap in &input.legs {
            if (snap.timestamp - input.timestamp).abs() > 1e-3 {
                return Err(EstimatorError::TimestampMisaligned {
                    what: "leg snapshot",
                    t: snap.timestamp,
                    frame_t: input.timestamp,
                });
            }
        }

        let (state, preint) = if is_first {
            let mut s = self.initial_state.take().expect("initial state consumed once");
            s.timestamp = input.timestamp;
            (s, None)
        } else {
            let prev = self.frames.last().unwrap();
            let (first, last) = match (input.imu_batch.first(), input.imu_batch.last()) {
                (Some(f), Some(l)) => (f.timestamp, l.timestamp),
                _ => {
                    return Err(EstimatorError::MissingImuCoverage {
                        from: prev.timestamp,
                        to: input.timestamp,
                    })
                }
            };
            if (first - prev.timestamp).abs() > 1e-3 || (last - input.timestamp).abs() > 1e-3 {
                return Err(EstimatorError::MissingImuCoverage {
                    from: prev.timestamp,
                    to: input.timestamp,
                });
            }
            let pre = integrate(
                &input.imu_batch,
                &prev.state.accel_bias,
                &prev.state.gyro_bias,
                &self.imu_noise,
            )?;
            let state = crate::imu::propagate(&prev.state, &pre, &self.gravity);
            (state, Some(pre))
        };

        let legs: BTreeMap<LegId, LegSnapshot> = input
            .legs
            .iter()
            .map(|s| {
                let mut snap = *s;
                snap.encoder_noise_std = snap.encoder_noise_std.max(MIN_ENCODER_STD);
                (s.leg_id, snap)
            })
            .collect();
        let interval_contact = if let Some(prev) = self.frames.last() {
            LegId::ALL
                .iter()
                .map(|leg| {
                    let both = prev.legs.get(leg).map(|s| s.contact).unwrap_or(false)
                        && legs.get(leg).map(|s| s.contact).unwrap_or(false);
                    (*leg, both)
                })
                .collect()
        } else {
            BTreeMap::new()
        };

        let obs: ObservationMap = input.observations.iter().map(|&(id, px)| (id, px)).collect();
        let feature_obs: Vec<FeatureObservation> = obs
            .iter()
            .map(|(&feature_id, &pixel)| FeatureObservation { feature_id, frame_index, pixel })
            .collect();
        self.tracks.update(frame_index, &feature_obs);

        self.frames.push(Frame {
            frame_index,
            timestamp: input.timestamp,
            state,
            imu_batch: input.imu_batch,
            preint,
            legs,
            interval_contact,
            obs,
        });
        self.next_frame_index += 1;

        if self.frames.len() >= 2 {
            let diag = self.optimize_round()?;
            self.output.rounds.push(diag);
        }
        let newest = self.frames.last().unwrap();
        self.output.estimates.push(FrameEstimate { frame_index, state: newest.state });

        if self.frames.len() > self.config.window_size {
            let t_marg = std::time::Instant::now();
            let res = if self.newest_is_keyframe() {
                self.marginalize_oldest()
            } else {
                self.discard_second_newest()
            };
            self.timers.marginalize += t_marg.elapsed().as_secs_f64();
            res?;
        }
        Ok(())
    }

    pub fn finish(self) -> EstimatorOutput {
        if std::env::var_os("QV_PROF").is_some() {
            eprintln!(
                "phase timers: assemble {:.2}s solve {:.2}s cost {:.2}s marg {:.2}s tri {:.2}s over {} rounds / {} iths",
                self.timers.assemble, self.timers.solve, self.timers.cost,
                self.timers.marginalize, self.timers.triangulate,
                self.timers.rounds, self.timers.iters
            );
        }
        self.output
    }

    pub fn window_len(&self) -> usize {
        self.frames.len()
    }

    /// Rotation-compensated mean parallax between the two newest frames.
    fn newest_is_keyframe(&self) -> bool {
        let n = self.frames.len();
        let (prev, curr) = (&self.frames[n - 2], &self.frames[n - 1]);
        let Some(pre) = curr.preint.as_ref() else { return true };
        let r_rel = pre.delta_q.rotation_matrix();
        let r_bc = self.camera.body_from_camera.rotation.rotation_matrix();
        let r_cam = r_bc.transpose() * r_rel.transpose() * r_bc;
        let mut sum = 0.0;
        let mut count = 0usize;
        for (id, px_curr) in &curr.obs {
            let Some(px_prev) = prev.obs.get(id) else { continue };
            let ray = self.camera.back_project(px_prev);
            let rotated = r_cam * ray;
            if rotated.z <= 1e-6 {
                continue;
            }
            let compensated = Vector2::new(
                self.camera.fx * rotated.x / rotated.z + self.camera.cx,
                self.camera.fy * rotated.y / rotated.z + self.camera.cy,
            );
            sum += (px_curr - compensated).norm();
            count += 1;
        }
        if count == 0 {
            return true;
        }
        sum / count as f64 >= self.config.keyframe_parallax_px
    }

    /// Gamma for this round according to the estimator mode.
    fn round_gamma(&self) -> AdaptiveFactor {
        match self.config.mode {
            EstimatorMode::Vio => AdaptiveFactor::identity(),
            EstimatorMode::VioLegFixed => AdaptiveFactor::fixed(self.config.fixed_gamma),
            EstimatorMode::WalkVio => {
                let motions: Vec<FrameMotion> = self
                    .frames
                    .windows(2)
                    .map(|pair| frame_motion(&pair[0].obs, &pair[1].obs, pair[1].frame_index))
                    .collect();
                gamma_from_motions(&motions, &self.config.gamma)
            }
        }
    }

    fn set_prior(&mut self, prior: MarginalizationPrior) {
        // the prior Jacobian is fixed (first-estimate), so its normal-
        // equation block is constant; cache it instead of re-forming the
        // large J^T J product every iteration
        self.prior_hessian = Some(prior.sqrt_jacobian.transpose() * &prior.sqrt_jacobian);
        self.prior = Some(prior);
    }

    fn window_pos(&self, frame_index: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.frame_index == frame_index)
    }

    /// Re-integrates intervals whose linearization bias drifted too far.
    fn refresh_preintegrations(&mut self) -> Result<(), EstimatorError> {
        for i in 1..self.frames.len() {
            if self.frames[i].imu_batch.len() < 2 {
                continue;
            }
            let bias_ok = {
                let prev = &self.frames[i - 1].state;
                self.frames[i]
                    .preint
                    .as_ref()
                    .map(|p| p.bias_still_valid(&prev.accel_bias, &prev.gyro_bias))
                    .unwrap_or(false)
            };
            if !bias_ok {
                let (ba, bg) = {
                    let prev = &self.frames[i - 1].state;
                    (prev.accel_bias, prev.gyro_bias)
                };
                let pre = integrate(&self.frames[i].imu_batch, &ba, &bg, &self.imu_noise)?;
                self.frames[i].preint = Some(pre);
            }
        }
        Ok(())
    }

    /// Triangulates tracks that do not have an inverse depth yet.
    fn triangulate_new_tracks(&mut self) {
        let poses: BTreeMap<usize, crate::geometry::Pose> =
            self.frames.iter().map(|f| (f.frame_index, f.state.pose())).collect();
        let camera = self.camera;
        let min_par = self.config.min_parallax_px;
        let mut updates: Vec<(u64, f64)> = Vec::new();
        for track in self.tracks.iter() {
            if track.inverse_depth.is_some() || track.observations.len() < 2 {
                continue;
            }
            if let Ok(lambda) = triangulate(track, &poses, &camera, min_par) {
                let depth = 1.0 / lambda;
                if (0.2..50.0).contains(&depth) {
                    updates.push((track.feature_id, lambda));
                }
            }
        }
        for (id, lambda) in updates {
            self.tracks.get_mut(id).unwrap().inverse_depth = Some(lambda);
        }
    }

    /// Deterministic list of factors over the current window.
    fn build_factors(&self, lambdas: &BTreeMap<u64, f64>) -> Vec<Factor> {
        let mut factors = Vec::new();
        if self.prior.is_some() {
            factors.push(Factor::Prior);
        }
        if let Some(g) = &self.gauge {
            if self.window_pos(g.frame_index).is_some() {
                factors.push(Factor::Gauge);
            }
        }
        for interval in 1..self.frames.len() {
            if self.frames[interval].preint.is_some() {
                factors.push(Factor::Imu { interval });
            }
        }
        if self.config.mode != EstimatorMode::Vio {
            for interval in 1..self.frames.len() {
                for leg in LegId::ALL {
                    if *self.frames[interval].interval_contact.get(&leg).unwrap_or(&false) {
                        factors.push(Factor::Leg { interval, leg });
                    }
                }
            }
        }
        for track in self.tracks.iter() {
            if !lambdas.contains_key(&track.feature_id) {
                continue;
            }
            for (obs_pos, obs) in track.observations.iter().enumerate() {
                if obs.frame_index == track.anchor_frame {
                    continue;
                }
                if self.window_pos(obs.frame_index).is_none() {
                    continue;
                }
                factors.push(Factor::Vision { feature: track.feature_id, obs_pos });
            }
        }
        factors
    }

    fn leg_model(&self, leg: LegId) -> &LegModel {
        self.legs.iter().find(|m| m.leg_id == leg).expect("leg model")
    }

    /// Whitened residual and Jacobian blocks of one factor at a candidate.
    /// Returns None when the factor drops out this round (cheirality).
    fn linearize_factor(
        &self,
        factor: &Factor,
        cand: &Candidate,
        layout: &Layout,
        gamma: &AdaptiveFactor,
    ) -> Option<LinFactor> {
        match *factor {
            Factor::Prior => {
                let prior = self.prior.as_ref().unwrap();
                let states: Vec<&BodyState> = prior
                    .frame_indices
                    .iter()
                    .map(|fi| &cand.states[self.window_pos(*fi).expect("prior frame in window")])
                    .collect();
                let residual = prior.residual(&states);
                let mut blocks = Vec::with_capacity(states.len());
                for (k, fi) in prior.frame_indices.iter().enumerate() {
                    let pos = self.window_pos(*fi).unwrap();
                    let jac = prior
                        .sqrt_jacobian
                        .view((0, STATE_DIM * k), (prior.dim(), STATE_DIM))
                        .into_owned();
                    blocks.push((layout.frame(pos), jac));
                }
                Some(LinFactor::Dense { blocks, residual, kind: FactorKind::Prior })
            }
            Factor::Gauge => {
                let gauge = self.gauge.as_ref().unwrap();
                let pos = self.window_pos(gauge.frame_index)?;
                let state = &cand.states[pos];
                let anchor = &gauge.state;
                let strong = self.config.gauge_information.sqrt();
                // rotation residual in world axes: x/y ~ roll/pitch, z ~ yaw
                let phi = quat_log(&state.orientation.compose(&anchor.orientation.inverse()));
                let drot = right_jacobian_inv(&phi) * anchor.orientation.rotation_matrix();
                let w_rp = 1.0 / INIT_ROLL_PITCH_STD;
                let w_v = 1.0 / INIT_VEL_STD;
                let w_ba = 1.0 / INIT_ACCEL_BIAS_STD;
                let w_bg = 1.0 / INIT_GYRO_BIAS_STD;
                let mut residual = DVector::zeros(STATE_DIM);
                let mut jac = DMatrix::zeros(STATE_DIM, STATE_DIM);
                for k in 0..3 {
                    residual[DP + k] = strong * (state.position[k] - anchor.position[k]);
                    jac[(DP + k, DP + k)] = strong;
                    let w_rot = if k == 2 { strong } else { w_rp };
                    residual[DTHETA + k] = w_rot * phi[k];
                    for c in 0..3 {
                        jac[(DTHETA + k, DTHETA + c)] = w_rot * drot[(k, c)];
                    }
                    residual[DV + k] = w_v * (state.velocity[k] - anchor.velocity[k]);
                    jac[(DV + k, DV + k)] = w_v;
                    residual[DBA + k] = w_ba * (state.accel_bias[k] - anchor.accel_bias[k]);
                    jac[(DBA + k, DBA + k)] = w_ba;
                    residual[DBG + k] = w_bg * (state.gyro_bias[k] - anchor.gyro_bias[k]);
                    jac[(DBG + k, DBG + k)] = w_bg;
                }
                Some(LinFactor::Dense {
                    blocks: vec![(layout.frame(pos), jac)],
                    residual,
                    kind: FactorKind::Gauge,
                })
            }
            Factor::Imu { interval } => {
                let pre = self.frames[interval].preint.as_ref().unwrap();
                let (r, ji, jj) = crate::imu::imu_residual(
                    &cand.states[interval - 1],
                    &cand.states[interval],
                    pre,
                    &self.gravity,
                );
                let s = sqrt_information(pre);
                Some(LinFactor::Imu {
                    offsets: (layout.frame(interval - 1), layout.frame(interval)),
                    ji: Box::new(s * ji),
                    jj: Box::new(s * jj),
                    residual: s * r,
                })
            }
            Factor::Leg { interval, leg } => {
                let model = self.leg_model(leg);
                let snap_i = &self.frames[interval - 1].legs[&leg];
                let snap_j = &self.frames[interval].legs[&leg];
                let (r, ji, jj) = leg_residual(
                    &cand.states[interval - 1],
                    &cand.states[interval],
                    snap_i,
                    snap_j,
                    model,
                )
                .expect("contact checked when the factor was registered");
                let omega = encoder_information(
                    model,
                    &snap_j.joint_angles,
                    snap_j.encoder_noise_std.max(MIN_ENCODER_STD),
                )
                .expect("positive noise");
                let (wr, wi, wj) = self.weight_leg(&r, &ji, &jj, &omega, gamma);
                Some(LinFactor::Leg {
                    offsets: (layout.frame(interval - 1), layout.frame(interval)),
                    ji: wi,
                    jj: wj,
                    residual: wr,
                })
            }
            Factor::Vision { feature, obs_pos } => {
                let track = self.tracks.get(feature).unwrap();
                let obs = &track.observations[obs_pos];
                let anchor_pos = self.window_pos(track.anchor_frame)?;
                let obs_frame_pos = self.window_pos(obs.frame_index)?;
                let lambda = *cand.lambdas.get(&feature)?;
                let anchor_px = track.anchor_observation().pixel;
                let (r, ja, jo, jl) = reprojection_residual(
                    &cand.states[anchor_pos],
                    &cand.states[obs_frame_pos],
                    lambda,
                    &anchor_px,
                    &obs.pixel,
                    &self.camera,
                )
                .ok()?;
                if anchor_pos == obs_frame_pos {
                    return None;
                }
                let sigma = self.camera.pixel_noise_std.max(MIN_PIXEL_STD);
                let w = 1.0 / sigma;
                let whitened_norm = (r * w).norm();
                let hub = huber_weight(whitened_norm, self.config.huber_delta_px).sqrt();
                let scale = w * hub;
                let lam_off = *layout.lambda_offsets.get(&feature)?;
                Some(LinFactor::Vision {
                    offsets: (layout.frame(anchor_pos), layout.frame(obs_frame_pos), lam_off),
                    ja: scale * ja,
                    jo: scale * jo,
                    jl: scale * jl,
                    residual: scale * r,
                })
            }
        }
    }

    fn weight_leg(
        &self,
        r: &Vector3<f64>,
        ji: &crate::leg::LegJacobian,
        jj: &crate::leg::LegJacobian,
        omega: &Matrix3<f64>,
        gamma: &AdaptiveFactor,
    ) -> (Vector3<f64>, crate::leg::LegJacobian, crate::leg::LegJacobian) {
        match self.config.gamma_application {
            GammaApplication::WeightedResidual => {
                let s = chol_sqrt(omega);
                let g = gamma.gamma;
                (s * g * r, s * g * ji, s * g * jj)
            }
            GammaApplication::ReweightedInformation => {
                let reweighted = gamma.gamma.transpose() * omega * gamma.gamma;
                let s = chol_sqrt(&reweighted);
                (s * r, s * ji, s * jj)
            }
        }
    }

    /// Which factors participate this round: vision terms must evaluate
    /// (cheirality) and pass the outlier gate at the round's starting point.
    fn factor_activity(&self, factors: &[Factor], cand: &Candidate) -> Vec<bool> {
        factors
            .iter()
            .map(|f| match *f {
                Factor::Vision { feature, obs_pos } => self
                    .vision_whitened_norm(feature, obs_pos, cand)
                    .map(|e| e <= self.config.outlier_gate_sigma)
                    .unwrap_or(false),
                _ => true,
            })
            .collect()
    }

    fn vision_whitened_norm(&self, feature: u64, obs_pos: usize, cand: &Candidate) -> Option<f64> {
        let track = self.tracks.get(feature).unwrap();
        let obs = &track.observations[obs_pos];
        let a = self.window_pos(track.anchor_frame)?;
        let o = self.window_pos(obs.frame_index)?;
        let lambda = *cand.lambdas.get(&feature)?;
        let (r, _, _, _) = reprojection_residual(
            &cand.states[a],
            &cand.states[o],
            lambda,
            &track.anchor_observation().pixel,
            &obs.pixel,
            &self.camera,
        )
        .ok()?;
        Some((r / self.camera.pixel_noise_std.max(MIN_PIXEL_STD)).norm())
    }

    fn vision_cost(&self, feature: u64, obs_pos: usize, cand: &Candidate) -> Option<f64> {
        let track = self.tracks.get(feature).unwrap();
        let obs = &track.observations[obs_pos];
        let a = self.window_pos(track.anchor_frame)?;
        let o = self.window_pos(obs.frame_index)?;
        let lambda = *cand.lambdas.get(&feature)?;
        let (r, _, _, _) = reprojection_residual(
            &cand.states[a],
            &cand.states[o],
            lambda,
            &track.anchor_observation().pixel,
            &obs.pixel,
            &self.camera,
        )
        .ok()?;
        let sigma = self.camera.pixel_noise_std.max(MIN_PIXEL_STD);
        let e = (r / sigma).norm();
        let d = self.config.huber_delta_px;
        Some(if e <= d { e * e } else { d * (2.0 * e - d) })
    }

    /// True (robustified) total cost of a candidate over the factors marked
    /// active at the round's linearization point. Returns None when an
    /// active factor stops evaluating (point pushed behind a camera), which
    /// rejects the step instead of rewarding the removal of its cost.
    fn total_cost(
        &self,
        factors: &[Factor],
        active: &[bool],
        cand: &Candidate,
        layout: &Layout,
        gamma: &AdaptiveFactor,
    ) -> Option<(f64, TermCosts)> {
        let mut costs = TermCosts::default();
        for (f, is_active) in factors.iter().zip(active.iter()) {
            if !is_active {
                continue;
            }
            match *f {
                Factor::Vision { feature, obs_pos } => {
                    costs.vision += self.vision_cost(feature, obs_pos, cand)?;
                }
                _ => {
                    let lin = self.linearize_factor(f, cand, layout, gamma)?;
                    let c = lin.cost();
                    match lin.kind() {
                        FactorKind::Prior => costs.prior += c,
                        FactorKind::Gauge => costs.gauge += c,
                        FactorKind::Imu => costs.imu += c,
                        FactorKind::Leg => costs.leg += c,
                        FactorKind::Vision => costs.vision += c,
                    }
                }
            }
        }
        Some((costs.prior + costs.gauge + costs.imu + costs.vision + costs.leg, costs))
    }

    fn solve_layout(&self, lambdas: &BTreeMap<u64, f64>) -> Layout {
        let n = self.frames.len();
        let mut lambda_offsets = BTreeMap::new();
        let mut off = STATE_DIM * n;
        for id in lambdas.keys() {
            lambda_offsets.insert(*id, off);
            off += 1;
        }
        Layout {
            frame_offsets: (0..n).map(|i| Some(STATE_DIM * i)).collect(),
            lambda_offsets,
            dim: off,
        }
    }

    fn assemble(
        &self,
        factors: &[Factor],
        active: &[bool],
        cand: &Candidate,
        layout: &Layout,
        gamma: &AdaptiveFactor,
    ) -> (DMatrix<f64>, DVector<f64>, usize) {
        let mut h = DMatrix::zeros(layout.dim, layout.dim);
        let mut g = DVector::zeros(layout.dim);
        let tagged: Vec<(Factor, bool)> = factors
            .iter()
            .zip(active.iter())
            .filter(|(f, _)| !matches!(f, Factor::Prior))
            .map(|(f, a)| (*f, *a))
            .collect();
        let n = self.assemble_into(factors, &tagged, cand, layout, gamma, &mut h, &mut g);
        (h, g, n)
    }

    /// Fills (h, g) in place; `tagged` carries the non-prior factors with
    /// their activity flags (hoisted out of the iteration loop).
    #[allow(clippy::too_many_arguments)]
    fn assemble_into(
        &self,
        factors: &[Factor],
        tagged: &[(Factor, bool)],
        cand: &Candidate,
        layout: &Layout,
        gamma: &AdaptiveFactor,
        h: &mut DMatrix<f64>,
        g: &mut DVector<f64>,
    ) -> usize {
        h.fill(0.0);
        g.fill(0.0);
        let linearized: Vec<Option<LinFactor>> = map_ordered(
            self.config.threading,
            tagged,
            |(f, is_active)| {
                is_active
                    .then(|| self.linearize_factor(f, cand, layout, gamma))
                    .flatten()
            },
        );
        let mut active_count = 0usize;
        // prior fast path: constant Hessian block plus the cheap gradient
        if factors.iter().any(|f| matches!(f, Factor::Prior)) {
            if let Some(prior) = &self.prior {
                let computed;
                let ph = match &self.prior_hessian {
                    Some(cached) => cached,
                    None => {
                        computed =
                            prior.sqrt_jacobian.transpose() * &prior.sqrt_jacobian;
                        &computed
                    }
                };
                active_count += 1;
                let states: Vec<&BodyState> = prior
                    .frame_indices
                    .iter()
                    .map(|fi| &cand.states[self.window_pos(*fi).expect("prior frame in window")])
                    .collect();
                let residual = prior.residual(&states);
                let gp = prior.sqrt_jacobian.transpose() * residual;
                // place the cached blocks through the layout: the frames are
                // not necessarily contiguous (the marginalization layout puts
                // eliminated landmarks between them)
                let offsets: Vec<usize> = prior
                    .frame_indices
                    .iter()
                    .map(|fi| layout.frame(self.window_pos(*fi).unwrap()))
                    .collect();
                for (a, &off_a) in offsets.iter().enumerate() {
                    for k in 0..STATE_DIM {
                        g[off_a + k] += gp[STATE_DIM * a + k];
                    }
                    for (b, &off_b) in offsets.iter().enumerate() {
                        let mut view = h.view_mut((off_a, off_b), (STATE_DIM, STATE_DIM));
                        view += &ph.view((STATE_DIM * a, STATE_DIM * b), (STATE_DIM, STATE_DIM));
                    }
                }
            }
        }
        fn add_block<const R: usize, const C: usize>(
            h: &mut DMatrix<f64>,
            off_r: usize,
            off_c: usize,
            block: &nalgebra::SMatrix<f64, R, C>,
        ) {
            let mut view = h.view_mut((off_r, off_c), (R, C));
            view += block;
        }
        fn add_vec<const R: usize>(
            g: &mut DVector<f64>,
            off: usize,
            v: &nalgebra::SVector<f64, R>,
        ) {
            let mut view = g.rows_mut(off, R);
            view += v;
        }
        for lin in linearized.iter().flatten() {
            active_count += 1;
            match lin {
                LinFactor::Dense { blocks, residual, .. } => {
                    for (off_a, jac_a) in blocks {
                        let ga = jac_a.transpose() * residual;
                        for (k, v) in ga.iter().enumerate() {
                            g[off_a + k] += v;
                        }
                        for (off_b, jac_b) in blocks {
                            let hab = jac_a.transpose() * jac_b;
                            let mut view =
                                h.view_mut((*off_a, *off_b), (hab.nrows(), hab.ncols()));
                            view += &hab;
                        }
                    }
                }
                LinFactor::Imu { offsets: (oi, oj), ji, jj, residual } => {
                    add_vec(g, *oi, &(ji.transpose() * residual));
                    add_vec(g, *oj, &(jj.transpose() * residual));
                    add_block(h, *oi, *oi, &(ji.transpose() * **ji));
                    add_block(h, *oi, *oj, &(ji.transpose() * **jj));
                    add_block(h, *oj, *oi, &(jj.transpose() * **ji));
                    add_block(h, *oj, *oj, &(jj.transpose() * **jj));
                }
                LinFactor::Leg { offsets: (oi, oj), ji, jj, residual } => {
                    add_vec(g, *oi, &(ji.transpose() * residual));
                    add_vec(g, *oj, &(jj.transpose() * residual));
                    add_block(h, *oi, *oi, &(ji.transpose() * ji));
                    add_block(h, *oi, *oj, &(ji.transpose() * jj));
                    add_block(h, *oj, *oi, &(jj.transpose() * ji));
                    add_block(h, *oj, *oj, &(jj.transpose() * jj));
                }
                LinFactor::Vision { offsets: (oa, oo, ol), ja, jo, jl, residual } => {
                    add_vec(g, *oa, &(ja.transpose() * residual));
                    add_vec(g, *oo, &(jo.transpose() * residual));
                    g[*ol] += jl.dot(residual);
                    add_block(h, *oa, *oa, &(ja.transpose() * ja));
                    add_block(h, *oa, *oo, &(ja.transpose() * jo));
                    add_block(h, *oo, *oa, &(jo.transpose() * ja));
                    add_block(h, *oo, *oo, &(jo.transpose() * jo));
                    let cross_a = ja.transpose() * jl;
                    let cross_o = jo.transpose() * jl;
                    for k in 0..STATE_DIM {
                        h[(oa + k, *ol)] += cross_a[k];
                        h[(*ol, oa + k)] += cross_a[k];
                        h[(oo + k, *ol)] += cross_o[k];
                        h[(*ol, oo + k)] += cross_o[k];
                    }
                    h[(*ol, *ol)] += jl.dot(jl);
                }
            }
        }
        active_count
    }

    fn retract(&self, cand: &Candidate, layout: &Layout, delta: &DVector<f64>) -> Candidate {
        let mut out = cand.clone();
        for (pos, state) in out.states.iter_mut().enumerate() {
            let off = layout.frame(pos);
            let d = StateDelta::from_fn(|k, _| delta[off + k]);
            *state = boxplus(state, &d);
        }
        for (id, lambda) in out.lambdas.iter_mut() {
            let off = layout.lambda_offsets[id];
            *lambda += delta[off];
        }
        out
    }

    /// One full optimization round (Levenberg-Marquardt).
    fn optimize_round(&mut self) -> Result<RoundDiagnostics, EstimatorError> {
        self.refresh_preintegrations()?;
        let t0 = std::time::Instant::now();
        self.triangulate_new_tracks();
        self.timers.triangulate += t0.elapsed().as_secs_f64();
        self.timers.rounds += 1;
        let gamma = self.round_gamma();
        self.current_gamma = gamma;

        // active landmarks: triangulated with >= 2 in-window observations
        let lambdas: BTreeMap<u64, f64> = self
            .tracks
            .iter()
            .filter_map(|t| {
                let lam = t.inverse_depth?;
                (t.observations.len() >= 2).then_some((t.feature_id, lam))
            })
            .collect();
        let layout = self.solve_layout(&lambdas);
        let factors = self.build_factors(&lambdas);
        let num_imu = factors.iter().filter(|f| matches!(f, Factor::Imu { .. })).count();
        let num_leg = factors.iter().filter(|f| matches!(f, Factor::Leg { .. })).count();
        let num_vis = factors.iter().filter(|f| matches!(f, Factor::Vision { .. })).count();

        let mut cand = Candidate {
            states: self.frames.iter().map(|f| f.state).collect(),
            lambdas,
        };
        let active = self.factor_activity(&factors, &cand);
        let (mut cost, _) = self
            .total_cost(&factors, &active, &cand, &layout, &gamma)
            .expect("active factors evaluate at the linearization point");
        let initial_cost = cost;

        let mut lm_lambda = self.config.initial_lambda;
        let mut stop = StopReason::MaxIterations;
        let mut iterations = 0usize;
        let mut gradient_norm = f64::INFINITY;
        let tagged: Vec<(Factor, bool)> = factors
            .iter()
            .zip(active.iter())
            .filter(|(f, _)| !matches!(f, Factor::Prior))
            .map(|(f, a)| (*f, *a))
            .collect();
        let mut h = DMatrix::zeros(layout.dim, layout.dim);
        let mut g = DVector::zeros(layout.dim);
        for _ in 0..self.config.max_iterations {
            iterations += 1;
            self.timers.iters += 1;
            let t_asm = std::time::Instant::now();
            self.assemble_into(&factors, &tagged, &cand, &layout, &gamma, &mut h, &mut g);
            self.timers.assemble += t_asm.elapsed().as_secs_f64();
            gradient_norm = g.amax();
            if gradient_norm < self.config.gradient_tolerance {
                stop = StopReason::GradientSmall;
                break;
            }
            let mut accepted = false;
            let mut flat_progress = false;
            let mut step_norm = 0.0;
            let n_frames_dim = STATE_DIM * self.frames.len();
            while lm_lambda <= 1e12 {
                let t_solve = std::time::Instant::now();
                let delta = solve_damped_with_landmark_schur(&h, &g, n_frames_dim, lm_lambda);
                self.timers.solve += t_solve.elapsed().as_secs_f64();
                let Some(delta) = delta else {
                    lm_lambda *= 10.0;
                    continue;
                };
                let next = self.retract(&cand, &layout, &delta);
                let t_cost = std::time::Instant::now();
                let next_cost = self.total_cost(&factors, &active, &next, &layout, &gamma);
                self.timers.cost += t_cost.elapsed().as_secs_f64();
                let Some((next_cost, _)) = next_cost else {
                    lm_lambda *= 10.0;
                    continue;
                };
                if next_cost <= cost {
                    step_norm = delta.norm();
                    let decrease = cost - next_cost;
                    cand = next;
                    cost = next_cost;
                    lm_lambda = (lm_lambda / 3.0).max(1e-9);
                    accepted = true;
                    if decrease <= self.config.function_tolerance * cost.max(1e-12) {
                        flat_progress = true;
                    }
                    break;
                }
                lm_lambda *= 10.0;
            }
            if !accepted {
                stop = StopReason::Stalled;
                break;
            }
            if flat_progress {
                stop = StopReason::FunctionSmall;
                break;
            }
            let ref_norm: f64 = cand
                .states
                .iter()
                .map(|s| s.position.norm_squared() + s.velocity.norm_squared())
                .sum::<f64>()
                .sqrt();
            if step_norm < self.config.step_tolerance * (1.0 + ref_norm) {
                stop = StopReason::StepSmall;
                break;
            }
        }

        // write back the accepted iterate
        for (frame, state) in self.frames.iter_mut().zip(cand.states.iter()) {
            frame.state = *state;
        }
        let mut dropped: Vec<u64> = Vec::new();
        for (id, lambda) in &cand.lambdas {
            if *lambda > 1e-4 {
                self.tracks.get_mut(*id).unwrap().inverse_depth = Some(*lambda);
            } else {
                dropped.push(*id);
            }
        }
        for id in dropped {
            self.tracks.get_mut(id).unwrap().inverse_depth = None;
        }

        let (final_cost, term_costs) = self
            .total_cost(&factors, &active, &cand, &layout, &gamma)
            .expect("accepted iterate keeps active factors alive");
        let newest = self.frames.last().unwrap();
        Ok(RoundDiagnostics {
            frame_index: newest.frame_index,
            timestamp: newest.timestamp,
            iterations,
            initial_cost,
            final_cost,
            gradient_norm,
            stop,
            gamma_eigenvalues: gamma.gamma_eigenvalues,
            gamma_unclamped: gamma.unclamped_eigenvalues,
            term_costs,
            num_imu_factors: num_imu,
            num_leg_factors: num_leg,
            num_vision_factors: num_vis,
            window_len: self.frames.len(),
        })
    }

    /// Eliminates the oldest frame and the landmarks anchored there into the
    /// dense prior, then slides the window.
    fn marginalize_oldest(&mut self) -> Result<(), EstimatorError> {
        let oldest = self.frames[0].frame_index;
        let gamma = self.current_gamma;

        // landmarks to eliminate: anchored at the oldest frame with a depth
        let elim_ids: Vec<u64> = self
            .tracks
            .iter()
            .filter(|t| t.anchor_frame == oldest && t.inverse_depth.is_some())
            .map(|t| t.feature_id)
            .collect();
        let n_elim = STATE_DIM + elim_ids.len();

        // layout: [frame0 | eliminated lambdas | retained frames]
        let n = self.frames.len();
        let mut frame_offsets = vec![None; n];
        frame_offsets[0] = Some(0);
        let mut off = STATE_DIM + elim_ids.len();
        for item in frame_offsets.iter_mut().take(n).skip(1) {
            *item = Some(off);
            off += STATE_DIM;
        }
        let mut lambda_offsets = BTreeMap::new();
        for (k, id) in elim_ids.iter().enumerate() {
            lambda_offsets.insert(*id, STATE_DIM + k);
        }
        let layout = Layout { frame_offsets, lambda_offsets, dim: off };

        // factors touching the oldest frame
        let mut factors = Vec::new();
        if self.prior.is_some() {
            factors.push(Factor::Prior);
        }
        if let Some(g) = &self.gauge {
            if g.frame_index == oldest {
                factors.push(Factor::Gauge);
            }
        }
        factors.push(Factor::Imu { interval: 1 });
        if self.config.mode != EstimatorMode::Vio {
            for leg in LegId::ALL {
                if *self.frames[1].interval_contact.get(&leg).unwrap_or(&false) {
                    factors.push(Factor::Leg { interval: 1, leg });
                }
            }
        }
        for id in &elim_ids {
            let track = self.tracks.get(*id).unwrap();
            for (obs_pos, obs) in track.observations.iter().enumerate() {
                if obs.frame_index != oldest {
                    factors.push(Factor::Vision { feature: *id, obs_pos });
                }
            }
        }

        let cand = Candidate {
            states: self.frames.iter().map(|f| f.state).collect(),
            lambdas: elim_ids
                .iter()
                .map(|id| (*id, self.tracks.get(*id).unwrap().inverse_depth.unwrap()))
                .collect(),
        };
        let active = self.factor_activity(&factors, &cand);
        let (h, g, _) = self.assemble(&factors, &active, &cand, &layout, &gamma);
        let (h_prime, g_prime) = schur_eliminate(&h, &g, n_elim)?;

        let retained_indices: Vec<usize> =
            self.frames.iter().skip(1).map(|f| f.frame_index).collect();
        let retained_states: Vec<BodyState> = self.frames.iter().skip(1).map(|f| f.state).collect();
        self.set_prior(MarginalizationPrior::from_information(
            retained_indices,
            retained_states,
            h_prime,
            g_prime,
        ));

        if self.gauge.as_ref().map(|g| g.frame_index == oldest).unwrap_or(false) {
            self.gauge = None;
        }
        // re-anchor tracks whose anchor leaves the window: the eliminated
        // inverse depth is transferred geometrically to the next observation
        // frame so the track keeps constraining future motion
        let affected: Vec<u64> = self
            .tracks
            .iter()
            .filter(|t| t.anchor_frame == oldest)
            .map(|t| t.feature_id)
            .collect();
        let poses: BTreeMap<usize, crate::geometry::Pose> =
            self.frames.iter().map(|f| (f.frame_index, f.state.pose())).collect();
        let camera = self.camera;
        let anchor_pose = poses[&oldest];
        for id in affected {
            let track = self.tracks.get_mut(id).unwrap();
            let world = track.inverse_depth.map(|lam| {
                let ray = camera.back_project(&track.anchor_observation().pixel);
                camera.camera_pose_in_world(&anchor_pose).transform(&(ray / lam))
            });
            track.observations.retain(|o| o.frame_index != oldest);
            if track.observations.is_empty() {
                self.tracks.remove(id);
                continue;
            }
            track.anchor_frame = track.observations[0].frame_index;
            track.inverse_depth = None;
            if let Some(p_w) = world {
                let pose = poses[&track.anchor_frame];
                let depth = camera.world_to_camera(&pose, &p_w).z;
                if (0.2..50.0).contains(&depth) {
                    track.inverse_depth = Some(1.0 / depth);
                }
            }
        }
        self.frames.remove(0);
        let new_oldest = self.frames[0].frame_index;
        self.tracks.retire_unseen(new_oldest);
        Ok(())
    }

    /// Drops the second-newest frame: its measurements are discarded, the
    /// IMU intervals around it are merged, and the prior (if it covers the
    /// frame) is reduced by eliminating the block without new information.
    fn discard_second_newest(&mut self) -> Result<(), EstimatorError> {
        let n = self.frames.len();
        debug_assert!(n >= 3);
        let dropped_index = self.frames[n - 2].frame_index;

        // merge IMU batches (they share the boundary sample)
        let mut merged = self.frames[n - 2].imu_batch.clone();
        let tail = &self.frames[n - 1].imu_batch;
        let skip = usize::from(
            merged.last().map(|l| tail.first().map(|f| f.timestamp == l.timestamp).unwrap_or(false))
                == Some(true),
        );
        merged.extend_from_slice(&tail[skip..]);
        let (ba, bg) = {
            let prev = &self.frames[n - 3].state;
            (prev.accel_bias, prev.gyro_bias)
        };
        let pre = integrate(&merged, &ba, &bg, &self.imu_noise)?;

        let merged_contact: BTreeMap<LegId, bool> = LegId::ALL
            .iter()
            .map(|leg| {
                let a = *self.frames[n - 2].interval_contact.get(leg).unwrap_or(&false);
                let b = *self.frames[n - 1].interval_contact.get(leg).unwrap_or(&false);
                (*leg, a && b)
            })
            .collect();

        if let Some(prior) = &self.prior {
            if prior.frame_indices.contains(&dropped_index) {
                let reduced = prior.drop_frame(dropped_index)?;
                self.set_prior(reduced);
            }
        }

        self.tracks.drop_frame_observations(dropped_index);
        let newest = self.frames.remove(n - 1);
        self.frames.pop(); // the discarded frame
        let mut newest = newest;
        newest.imu_batch = merged;
        newest.preint = Some(pre);
        newest.interval_contact = merged_contact;
        self.frames.push(newest);
        Ok(())
    }

    /// Total window cost at the current states (diagnostics and tests).
    pub fn current_cost(&self) -> f64 {
        let lambdas: BTreeMap<u64, f64> = self
            .tracks
            .iter()
            .filter_map(|t| t.inverse_depth.map(|l| (t.feature_id, l)))
            .collect();
        let layout = self.solve_layout(&lambdas);
        let factors = self.build_factors(&lambdas);
        let cand = Candidate { states: self.frames.iter().map(|f| f.state).collect(), lambdas };
        let active = self.factor_activity(&factors, &cand);
        self.total_cost(&factors, &active, &cand, &layout, &self.current_gamma)
            .expect("activity derived at the same point")
            .0
    }

    /// States of the current window, oldest first (diagnostics and tests).
    pub fn window_states(&self) -> Vec<BodyState> {
        self.frames.iter().map(|f| f.state).collect()
    }

    pub fn current_gamma(&self) -> &AdaptiveFactor {
        &self.current_gamma
    }
}

/// Solves (H + lm diag(H)) delta = -g, eliminating the landmark columns
/// first: two inverse depths never share a factor, so the landmark block of
/// H is diagonal and the reduced system only spans the frame states.
fn solve_damped_with_landmark_schur(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    n_frames_dim: usize,
    lm_lambda: f64,
) -> Option<DVector<f64>> {
    let dim = h.nrows();
    let n_lm = dim - n_frames_dim;
    let damp = |k: usize| h[(k, k)].max(1e-8) * lm_lambda;

    if n_lm == 0 {
        let mut damped = h.clone();
        for k in 0..dim {
            damped[(k, k)] += damp(k);
        }
        return Some(damped.cholesky()?.solve(&(-g)));
    }

    let mut d_inv = DVector::zeros(n_lm);
    for k in 0..n_lm {
        let d = h[(n_frames_dim + k, n_frames_dim + k)] + damp(n_frames_dim + k);
        if d <= 0.0 {
            return None;
        }
        d_inv[k] = 1.0 / d;
    }
    let b = h.view((0, n_frames_dim), (n_frames_dim, n_lm));
    let mut b_dinv = b.into_owned();
    for c in 0..n_lm {
        let sc = d_inv[c];
        for r in 0..n_frames_dim {
            b_dinv[(r, c)] *= sc;
        }
    }
    // A' = A - B D^-1 B^T
    let mut reduced = h.view((0, 0), (n_frames_dim, n_frames_dim)).into_owned();
    reduced.gemm(-1.0, &b_dinv, &b.transpose(), 1.0);
    for k in 0..n_frames_dim {
        reduced[(k, k)] += damp(k);
    }
    let g_l = g.rows(n_frames_dim, n_lm).into_owned();
    // reduced rhs: -(g_f - B D^-1 g_l)
    let mut rhs = g.rows(0, n_frames_dim).into_owned();
    rhs.gemv(-1.0, &b_dinv, &g_l, 1.0);
    rhs.neg_mut();
    let delta_f = reduced.cholesky()?.solve(&rhs);
    // back-substitute: delta_l = -D^-1 (g_l + B^T delta_f)
    let mut delta_l = g_l;
    delta_l.gemv_tr(1.0, &b.into_owned(), &delta_f, 1.0);
    for k in 0..n_lm {
        delta_l[k] *= -d_inv[k];
    }
    let mut delta = DVector::zeros(dim);
    delta.rows_mut(0, n_frames_dim).copy_from(&delta_f);
    delta.rows_mut(n_frames_dim, n_lm).copy_from(&delta_l);
    Some(delta)
}

/// Upper-triangular S with S^T S = M for a symmetric positive definite M.
fn chol_sqrt(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut sym = 0.5 * (m + m.transpose());
    for _ in 0..3 {
        if let Some(ch) = nalgebra::Cholesky::new(sym) {
            return ch.l().transpose();
        }
        for k in 0..3 {
            sym[(k, k)] += 1e-12 * sym[(k, k)].abs().max(1.0);
        }
    }
    panic!("information matrix not positive definite");
}

/// Runs an estimator mode over a dataset: groups the sensor streams by
/// camera frame, initializes from the ground truth at the first frame, and
/// feeds every frame through the window.
pub fn run_estimator(
    dataset: &Dataset,
    config: WindowConfig,
) -> Result<EstimatorOutput, EstimatorError> {
    config.validate()?;
    if dataset.cams.is_empty() {
        return Err(EstimatorError::EmptyDataset);
    }

    // initial state from the ground truth at the first camera frame
    let t0 = dataset.cams[0].timestamp;
    let init_gt = dataset
        .gt
        .iter()
        .min_by(|a, b| {
            (a.timestamp - t0).abs().partial_cmp(&(b.timestamp - t0).abs()).unwrap()
        })
        .filter(|g| (g.timestamp - t0).abs() <= 1e-3)
        .ok_or(EstimatorError::NoInitialState)?;
    let initial = BodyState {
        position: init_gt.position,
        orientation: init_gt.orientation,
        velocity: init_gt.velocity,
        accel_bias: Vector3::zeros(),
        gyro_bias: Vector3::zeros(),
        timestamp: t0,
    };

    let mut estimator = Estimator::new(config, &dataset.header, initial);

    let encoder_std = dataset.header.encoder_noise_std.max(MIN_ENCODER_STD);
    let mut prev_t = t0;
    for (k, cam) in dataset.cams.iter().enumerate() {
        let t = cam.timestamp;
        let imu_batch: Vec<ImuSample> = if k == 0 {
            Vec::new()
        } else {
            let start = dataset.imu.partition_point(|s| s.timestamp < prev_t - 1e-9);
            let end = dataset.imu.partition_point(|s| s.timestamp <= t + 1e-9);
            dataset.imu[start..end].to_vec()
        };
        let mut legs: Vec<LegSnapshot> = Vec::with_capacity(4);
        for leg in LegId::ALL {
            // nearest joint record within the alignment tolerance
            let best = dataset
                .joints
                .iter()
                .filter(|j| j.leg == leg && (j.timestamp - t).abs() <= 1e-3)
                .min_by(|a, b| {
                    (a.timestamp - t).abs().partial_cmp(&(b.timestamp - t).abs()).unwrap()
                });
            if let Some(j) = best {
                legs.push(LegSnapshot {
                    timestamp: j.timestamp,
                    leg_id: leg,
                    joint_angles: j.angles,
                    contact: j.contact,
                    encoder_noise_std: encoder_std,
                });
            }
        }
        let observations: Vec<(u64, Vector2<f64>)> = dataset
            .observations_for_frame(cam.frame_id)
            .iter()
            .map(|o| (o.feature_id, o.pixel))
            .collect();
        estimator.add_frame(FrameInput { timestamp: t, imu_batch, legs, observations })?;
        prev_t = t;
    }
    Ok(estimator.finish())
}


#[cfg(test)]
mod marginalize_tests {
    use super::tests::{header, initial_at_height, static_input};
    use super::*;

    #[test]
    fn landmark_seen_only_in_oldest_frame_is_dropped() {
        // forcing every frame to be a keyframe exercises the marginalization
        // path even without camera motion
        let config = WindowConfig {
            window_size: 3,
            keyframe_parallax_px: 0.0,
            ..Default::default()
        };
        let mut est = Estimator::new(config, &header(), initial_at_height());
        for k in 0..5 {
            let mut input = static_input(k as f64 * 0.05, k > 0);
            // feature 99 only in the very first frame; feature 7 everywhere
            if k == 0 {
                input.observations.push((99, Vector2::new(320.0, 240.0)));
            }
            input.observations.push((7, Vector2::new(300.0 + k as f64, 200.0)));
            est.add_frame(input).unwrap();
        }
        assert!(est.tracks.get(99).is_none(), "one-shot landmark must be dropped");
        let survivor = est.tracks.get(7).expect("persistent landmark kept");
        assert!(survivor.observations.len() >= 3);
        assert!(est.prior.is_some());
    }
}
