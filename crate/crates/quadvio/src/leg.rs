//! Forward kinematics of a 3-DOF leg and the contact-anchored residual.
//!
//! Joint order per leg: abduction about the body x axis, hip flexion and knee
//! about the (negated) y axis, so positive flexion/knee swings the foot
//! forward. At zero angles the leg hangs straight down; with the knee at
//! pi/2 the shank points forward.
//!
//! The residual constrains two window frames through a foot that stays
//! planted between them: expressed in the body frame of the later frame,
//! `r = s_j - R_j^T (R_i s_i + p_i - p_j)`.

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::geometry::{skew, BodyState, DP, DTHETA, STATE_DIM};

/// Residual Jacobian w.r.t. one 15-dim frame state.
pub type LegJacobian = SMatrix<f64, 3, STATE_DIM>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LegId {
    LeftFront,
    RightFront,
    LeftHind,
    RightHind,
}

impl LegId {
    pub const ALL: [LegId; 4] =
        [LegId::LeftFront, LegId::RightFront, LegId::LeftHind, LegId::RightHind];

    pub fn code(&self) -> &'static str {
        match self {
            LegId::LeftFront => "LF",
            LegId::RightFront => "RF",
            LegId::LeftHind => "LH",
            LegId::RightHind => "RH",
        }
    }

    pub fn from_code(code: &str) -> Option<LegId> {
        match code {
            "LF" => Some(LegId::LeftFront),
            "RF" => Some(LegId::RightFront),
            "LH" => Some(LegId::LeftHind),
            "RH" => Some(LegId::RightHind),
            _ => None,
        }
    }

    /// +1 for left legs, -1 for right legs (sign of the lateral hip link).
    pub fn side(&self) -> f64 {
        match self {
            LegId::LeftFront | LegId::LeftHind => 1.0,
            LegId::RightFront | LegId::RightHind => -1.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LegError {
    #[error("leg {leg} not in contact in frame {frame}")]
    NotInContact { leg: &'static str, frame: &'static str },
    #[error("snapshots belong to different legs")]
    LegMismatch,
    #[error("foot target out of the leg workspace")]
    OutOfWorkspace,
    #[error("encoder noise std must be positive")]
    InvalidNoise,
}

/// Geometry of one leg: where it attaches and how long its links are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegModel {
    pub leg_id: LegId,
    /// Abduction joint position in the body frame (m).
    pub hip_offset: Vector3<f64>,
    /// Lateral link from the abduction joint to the flexion joint (m).
    pub hip_length: f64,
    pub thigh_length: f64,
    pub shank_length: f64,
    /// Mechanical limits per joint, (low, high) rad.
    pub joint_limits: [(f64, f64); 3],
}

impl LegModel {
    /// Largest possible distance from the body origin to the foot.
    pub fn max_reach(&self) -> f64 {
        self.hip_offset.norm() + self.hip_length + self.thigh_length + self.shank_length
    }

    pub fn within_limits(&self, theta: &Vector3<f64>) -> bool {
        (0..3).all(|k| theta[k] >= self.joint_limits[k].0 && theta[k] <= self.joint_limits[k].1)
    }
}

fn rot_x(q: f64) -> Matrix3<f64> {
    let (s, c) = q.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// Rotation about -y: positive angles swing -z toward +x.
fn rot_flex(q: f64) -> Matrix3<f64> {
    let (s, c) = q.sin_cos();
    Matrix3::new(c, 0.0, -s, 0.0, 1.0, 0.0, s, 0.0, c)
}

/// Foot position in the body frame together with the 3x3 Jacobian d s / d theta.
pub fn forward_kinematics(model: &LegModel, theta: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let (q1, q2, q3) = (theta.x, theta.y, theta.z);
    let r1 = rot_x(q1);
    let r2 = rot_flex(q2);
    let r3 = rot_flex(q3);

    let shank = Vector3::new(0.0, 0.0, -model.shank_length);
    let thigh = Vector3::new(0.0, 0.0, -model.thigh_length);
    let hip = Vector3::new(0.0, model.leg_id.side() * model.hip_length, 0.0);

    let w = thigh + r3 * shank; // flexion-frame vector from hip joint to foot
    let u = hip + r2 * w; // abduction-frame vector
    let s = model.hip_offset + r1 * u;

    // chain-rule columns: derivative of each rotation about its own axis
    let ex = Vector3::x();
    let ney = -Vector3::y();
    let col1 = r1 * ex.cross(&u);
    let col2 = r1 * r2 * ney.cross(&w);
    let col3 = r1 * r2 * r3 * ney.cross(&shank);

    debug_assert!(s.norm() <= model.max_reach() + 1e-9);
    (s, Matrix3::from_columns(&[col1, col2, col3]))
}

/// Closed-form inverse kinematics: joint angles whose FK reaches `target`
/// (body frame). Picks the positive-knee branch with the foot below the hip.
pub fn inverse_kinematics(
    model: &LegModel,
    target: &Vector3<f64>,
) -> Result<Vector3<f64>, LegError> {
    let f = target - model.hip_offset;
    let lh = model.leg_id.side() * model.hip_length;
    let rho2 = f.y * f.y + f.z * f.z;
    if rho2 < lh * lh {
        return Err(LegError::OutOfWorkspace);
    }
    let phi = f.z.atan2(f.y);
    // cos(q1 - phi) * rho = lh gives two abduction branches
    let delta = (lh / rho2.sqrt()).acos();
    let mut solutions: Vec<Vector3<f64>> = Vec::with_capacity(2);
    for q1 in [phi + delta, phi - delta] {
        let fr = rot_x(-q1) * f;
        let (x, z) = (fr.x, fr.z);
        let d2 = x * x + z * z;
        let (lt, ls) = (model.thigh_length, model.shank_length);
        let cos_knee = (d2 - lt * lt - ls * ls) / (2.0 * lt * ls);
        if !(-1.0..=1.0).contains(&cos_knee) {
            continue;
        }
        let q3 = cos_knee.acos();
        let gamma = x.atan2(-z);
        let beta = (ls * q3.sin()).atan2(lt + ls * q3.cos());
        let q2 = normalize_angle(gamma - beta);
        solutions.push(Vector3::new(normalize_angle(q1), q2, q3));
    }
    // prefer in-limit solutions, then the most upright flexion
    solutions
        .into_iter()
        .filter(|theta| model.within_limits(theta))
        .min_by(|a, b| a.y.abs().partial_cmp(&b.y.abs()).unwrap())
        .ok_or(LegError::OutOfWorkspace)
}

fn normalize_angle(a: f64) -> f64 {
    let mut x = a;
    while x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    while x < -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    }
    x
}

/// Joint encoder reading of one leg at one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegSnapshot {
    pub timestamp: f64,
    pub leg_id: LegId,
    pub joint_angles: Vector3<f64>,
    pub contact: bool,
    /// Per-axis encoder white-noise std (rad).
    pub encoder_noise_std: f64,
}

/// Contact-anchored residual between two frames that share a planted foot.
///
/// Returns the 3-vector residual (body frame of `state_j`) and its Jacobians
/// w.r.t. both 15-dim states. Errors unless both snapshots report contact.
pub fn leg_residual(
    state_i: &BodyState,
    state_j: &BodyState,
    snap_i: &LegSnapshot,
    snap_j: &LegSnapshot,
    model: &LegModel,
) -> Result<(Vector3<f64>, LegJacobian, LegJacobian), LegError> {
    if snap_i.leg_id != snap_j.leg_id {
        return Err(LegError::LegMismatch);
    }
    if !snap_i.contact {
        return Err(LegError::NotInContact { leg: snap_i.leg_id.code(), frame: "i" });
    }
    if !snap_j.contact {
        return Err(LegError::NotInContact { leg: snap_j.leg_id.code(), frame: "j" });
    }

    let (s_i, _) = forward_kinematics(model, &snap_i.joint_angles);
    let (s_j, _) = forward_kinematics(model, &snap_j.joint_angles);

    let r_i = state_i.orientation.rotation_matrix();
    let r_j_t = state_j.orientation.rotation_matrix().transpose();
    let u = r_i * s_i + state_i.position - state_j.position;
    let r = s_j - r_j_t * u;

    let mut ji = LegJacobian::zeros();
    let mut jj = LegJacobian::zeros();
    ji.fixed_view_mut::<3, 3>(0, DP).copy_from(&(-r_j_t));
    ji.fixed_view_mut::<3, 3>(0, DTHETA).copy_from(&(r_j_t * r_i * skew(&s_i)));
    jj.fixed_view_mut::<3, 3>(0, DP).copy_from(&r_j_t);
    jj.fixed_view_mut::<3, 3>(0, DTHETA).copy_from(&(-skew(&(r_j_t * u))));

    Ok((r, ji, jj))
}

/// Information matrix of the leg measurement from encoder noise propagated
/// through the kinematics: `(J sigma^2 J^T + eps I)^-1` with eps = 1e-9 m^2.
pub fn encoder_information(
    model: &LegModel,
    theta: &Vector3<f64>,
    encoder_noise_std: f64,
) -> Result<Matrix3<f64>, LegError> {
    if !(encoder_noise_std > 0.0) {
        return Err(LegError::InvalidNoise);
    }
    let (_, jac) = forward_kinematics(model, theta);
    let var = encoder_noise_std * encoder_noise_std;
    let cov = jac * jac.transpose() * var + Matrix3::identity() * 1e-9;
    let info = cov.try_inverse().expect("regularized covariance is invertible");
    Ok(0.5 * (info + info.transpose()))
}

/// Leg set of a quadruped with symmetric geometry.
pub fn standard_legs() -> [LegModel; 4] {
    LegId::ALL.map(|leg_id| {
        let sx = match leg_id {
            LegId::LeftFront | LegId::RightFront => 1.0,
            _ => -1.0,
        };
        LegModel {
            leg_id,
            hip_offset: Vector3::new(sx * 0.3, leg_id.side() * 0.2, 0.0),
            hip_length: 0.1,
            thigh_length: 0.25,
            shank_length: 0.33,
            joint_limits: [(-1.0, 1.0), (-2.0, 2.0), (0.02, 2.9)],
        }
    })
}
