//! Rotation and pose algebra shared by the estimator, simulator, and residuals.
//!
//! Conventions used everywhere in this crate:
//! - Hamilton quaternions stored as (w, x, y, z), hemisphere-normalized so w >= 0.
//! - Orientation perturbations are right (body-frame): q <- q * exp(delta).
//! - State deltas are ordered (dp, dtheta, dv, dba, dbg), 15 values per frame.

use nalgebra::{Matrix3, SVector, Vector3};

/// Index of the position block inside a 15-dim state delta.
pub const DP: usize = 0;
/// Index of the orientation block.
pub const DTHETA: usize = 3;
/// Index of the velocity block.
pub const DV: usize = 6;
/// Index of the accelerometer-bias block.
pub const DBA: usize = 9;
/// Index of the gyroscope-bias block.
pub const DBG: usize = 12;
/// Dimension of one frame state on the tangent space.
pub const STATE_DIM: usize = 15;

pub type StateDelta = SVector<f64, STATE_DIM>;

/// Unit quaternion in Hamilton convention, stored (w, x, y, z).
///
/// Every constructor and composition renormalizes and flips the sign so that
/// w >= 0, giving a canonical representative of the rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuat {
    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds from raw components, normalizing and canonicalizing.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n2 = w * w + x * x + y * y + z * z;
        // skip the division when already unit so that composing with the
        // identity reproduces the operand bit for bit
        let s = if (n2 - 1.0).abs() < 4.0 * f64::EPSILON {
            if w < 0.0 { -1.0 } else { 1.0 }
        } else {
            let n = n2.sqrt();
            if w < 0.0 { -1.0 / n } else { 1.0 / n }
        };
        Self { w: w * s, x: x * s, y: y * s, z: z * s }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product self * rhs.
    pub fn compose(&self, rhs: &UnitQuat) -> UnitQuat {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (rhs.w, rhs.x, rhs.y, rhs.z);
        UnitQuat::new(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )
    }

    pub fn inverse(&self) -> UnitQuat {
        UnitQuat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates a vector: R(q) * v.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        // v' = v + 2w (u x v) + 2 u x (u x v), u = vector part
        let u = Vector3::new(self.x, self.y, self.z);
        let t = 2.0 * u.cross(v);
        v + self.w * t + u.cross(&t)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotation about +z by `yaw`, then +y by `pitch`, then +x by `roll`
    /// (ZYX Euler composition, world-to-body).
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        let qz = quat_exp(&Vector3::new(0.0, 0.0, yaw));
        let qy = quat_exp(&Vector3::new(0.0, pitch, 0.0));
        let qx = quat_exp(&Vector3::new(roll, 0.0, 0.0));
        qz.compose(&qy).compose(&qx)
    }
}

/// Exponential map from a rotation vector (rad) to a unit quaternion.
///
/// Uses a Taylor branch below 1e-8 rad so quat_exp(0) is exactly the identity.
pub fn quat_exp(omega: &Vector3<f64>) -> UnitQuat {
    let theta = omega.norm();
    let (w, k) = if theta < 1e-8 {
        // cos(t/2) ~ 1 - t^2/8, sin(t/2)/t ~ 1/2 - t^2/48
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    UnitQuat::new(w, k * omega.x, k * omega.y, k * omega.z)
}

/// Logarithm map: rotation vector of q, with norm < pi for canonical q.
pub fn quat_log(q: &UnitQuat) -> Vector3<f64> {
    let v = Vector3::new(q.x, q.y, q.z);
    let vn = v.norm();
    // canonical representation has w >= 0, so the angle is in [0, pi]
    let w = q.w.abs();
    if vn < 1e-12 {
        return 2.0 * v / w;
    }
    let angle = 2.0 * vn.atan2(w);
    v * (angle / vn)
}

/// Skew-symmetric (cross-product) matrix of v.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation-matrix exponential (Rodrigues formula).
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    Matrix3::identity() + (theta.sin() / theta) * k
        + ((1.0 - theta.cos()) / (theta * theta)) * k * k
}

/// Right Jacobian of SO(3): d exp(phi + d) ~ exp(phi) exp(Jr(phi) d).
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    Matrix3::identity() - ((1.0 - theta.cos()) / t2) * k
        + ((theta - theta.sin()) / (t2 * theta)) * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let t2 = theta * theta;
    let coef = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coef * k * k
}

/// Rigid transform: rotation plus translation, mapping body points to world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuat,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: UnitQuat::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: UnitQuat, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// self then rhs: (self * rhs)(p) = self(rhs(p)).
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose {
            rotation: self.rotation.compose(&rhs.rotation),
            translation: self.rotation.rotate(&rhs.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose { rotation: rinv, translation: -rinv.rotate(&self.translation) }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }
}

/// Pose, velocity, and IMU biases of one sliding-window frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyState {
    /// Position of the body in the world frame (m).
    pub position: Vector3<f64>,
    /// Orientation of the body in the world frame.
    pub orientation: UnitQuat,
    /// Velocity of the body in the world frame (m/s).
    pub velocity: Vector3<f64>,
    /// Accelerometer bias (m/s^2).
    pub accel_bias: Vector3<f64>,
    /// Gyroscope bias (rad/s).
    pub gyro_bias: Vector3<f64>,
    /// Time of this frame (s).
    pub timestamp: f64,
}

impl BodyState {
    pub fn new(timestamp: f64) -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuat::identity(),
            velocity: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            timestamp,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation, self.position)
    }
}

/// Retraction: applies a 15-dim tangent delta (dp, dtheta, dv, dba, dbg).
///
/// Position, velocity, and biases update additively; the orientation by
/// right-multiplication with quat_exp(dtheta). The timestamp is unchanged.
pub fn boxplus(state: &BodyState, delta: &StateDelta) -> BodyState {
    BodyState {
        position: state.position + delta.fixed_rows::<3>(DP).into_owned(),
        orientation: state
            .orientation
            .compose(&quat_exp(&delta.fixed_rows::<3>(DTHETA).into_owned())),
        velocity: state.velocity + delta.fixed_rows::<3>(DV).into_owned(),
        accel_bias: state.accel_bias + delta.fixed_rows::<3>(DBA).into_owned(),
        gyro_bias: state.gyro_bias + delta.fixed_rows::<3>(DBG).into_owned(),
        timestamp: state.timestamp,
    }
}

/// Local difference such that boxplus(b, boxminus(a, b)) == a.
pub fn boxminus(a: &BodyState, b: &BodyState) -> StateDelta {
    let mut d = StateDelta::zeros();
    d.fixed_rows_mut::<3>(DP).copy_from(&(a.position - b.position));
    d.fixed_rows_mut::<3>(DTHETA)
        .copy_from(&quat_log(&b.orientation.inverse().compose(&a.orientation)));
    d.fixed_rows_mut::<3>(DV).copy_from(&(a.velocity - b.velocity));
    d.fixed_rows_mut::<3>(DBA).copy_from(&(a.accel_bias - b.accel_bias));
    d.fixed_rows_mut::<3>(DBG).copy_from(&(a.gyro_bias - b.gyro_bias));
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
        // independent dense evaluation of the rotation matrix
        let theta = omega.norm();
        if theta == 0.0 {
            return Matrix3::identity();
        }
        let a = omega / theta;
        let k = skew(&a);
        Matrix3::identity() + theta.sin() * k + (1.0 - theta.cos()) * (k * k)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let q = quat_exp(&Vector3::zeros());
        assert_eq!(q, UnitQuat::identity());
    }

    #[test]
    fn exp_pi_about_x_flips_y() {
        let q = quat_exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        let v = q.rotate(&Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(v, Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_matches_rodrigues() {
        let omega = Vector3::new(0.3, -0.2, 0.1);
        let q = quat_exp(&omega);
        let expected = rodrigues(&omega);
        assert_relative_eq!(q.rotation_matrix(), expected, epsilon = 1e-12);
    }

    #[test]
    fn quaternion_is_canonical() {
        let q = UnitQuat::new(-0.5, 0.5, 0.5, 0.5);
        assert!(q.w >= 0.0);
        assert_relative_eq!(q.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_identities() {
        let p = Pose::new(
            quat_exp(&Vector3::new(0.2, -0.1, 0.4)),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let id = Pose::identity();
        let c = id.compose(&p);
        assert_eq!(c.rotation, p.rotation);
        assert_eq!(c.translation, p.translation);
        let e = p.compose(&p.inverse());
        assert_relative_eq!(e.translation.norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!(quat_log(&e.rotation).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn boxplus_zero_keeps_state() {
        let mut s = BodyState::new(1.5);
        s.position = Vector3::new(1.0, 2.0, 3.0);
        s.orientation = quat_exp(&Vector3::new(0.1, 0.2, 0.3));
        let t = boxplus(&s, &StateDelta::zeros());
        assert_eq!(s, t);
    }

    #[test]
    fn boxplus_shifts_position_component() {
        let s = BodyState::new(0.0);
        let mut d = StateDelta::zeros();
        d[DP] = 1.0;
        let t = boxplus(&s, &d);
        assert_eq!(t.position.x, 1.0);
        assert_eq!(t.position.y, 0.0);
    }

    #[test]
    fn boxplus_jacobian_at_zero_is_identity() {
        // finite differences of boxminus(boxplus(s, d), s) at d = 0
        let mut s = BodyState::new(0.0);
        s.position = Vector3::new(0.3, -0.7, 1.1);
        s.orientation = quat_exp(&Vector3::new(-0.4, 0.2, 0.9));
        s.velocity = Vector3::new(0.5, 0.0, -0.2);
        let h = 1e-7;
        for col in 0..STATE_DIM {
            let mut dp = StateDelta::zeros();
            dp[col] = h;
            let mut dm = StateDelta::zeros();
            dm[col] = -h;
            let fp = boxminus(&boxplus(&s, &dp), &s);
            let fm = boxminus(&boxplus(&s, &dm), &s);
            let deriv = (fp - fm) / (2.0 * h);
            for row in 0..STATE_DIM {
                let expected = if row == col { 1.0 } else { 0.0 };
                assert!(
                    (deriv[row] - expected).abs() < 1e-6,
                    "row {row} col {col}: {}",
                    deriv[row]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn exp_log_roundtrip(
            x in -0.9f64..0.9, y in -0.9f64..0.9, z in -0.9f64..0.9, scale in 0.0f64..3.0
        ) {
            let mut omega = Vector3::new(x, y, z);
            if omega.norm() > 1e-12 {
                omega = omega.normalize() * (omega.norm() * scale).min(3.1);
            }
            prop_assume!(omega.norm() < std::f64::consts::PI);
            let back = quat_log(&quat_exp(&omega));
            prop_assert!((back - omega).norm() < 1e-9);
        }

        #[test]
        fn composition_is_associative(
            a in proptest::array::uniform3(-1.0f64..1.0),
            b in proptest::array::uniform3(-1.0f64..1.0),
            c in proptest::array::uniform3(-1.0f64..1.0),
            ta in proptest::array::uniform3(-5.0f64..5.0),
            tb in proptest::array::uniform3(-5.0f64..5.0),
            tc in proptest::array::uniform3(-5.0f64..5.0),
        ) {
            let p = Pose::new(quat_exp(&Vector3::from(a)), Vector3::from(ta));
            let q = Pose::new(quat_exp(&Vector3::from(b)), Vector3::from(tb));
            let r = Pose::new(quat_exp(&Vector3::from(c)), Vector3::from(tc));
            let lhs = p.compose(&q).compose(&r);
            let rhs = p.compose(&q.compose(&r));
            prop_assert!((lhs.translation - rhs.translation).norm() < 1e-9);
            prop_assert!(
                quat_log(&lhs.rotation.inverse().compose(&rhs.rotation)).norm() < 1e-9
            );
        }

        #[test]
        fn boxplus_roundtrip(
            d in proptest::array::uniform15(-0.8f64..0.8)
        ) {
            let mut s = BodyState::new(2.0);
            s.orientation = quat_exp(&Vector3::new(0.3, -0.5, 0.2));
            s.position = Vector3::new(1.0, 2.0, 3.0);
            let delta = StateDelta::from_column_slice(&d);
            let back = boxplus(&boxplus(&s, &delta), &(-delta));
            prop_assert!((back.position - s.position).norm() < 1e-9);
            prop_assert!(
                quat_log(&back.orientation.inverse().compose(&s.orientation)).norm() < 1e-9
            );
            prop_assert!((back.velocity - s.velocity).norm() < 1e-9);
        }
    }
}
