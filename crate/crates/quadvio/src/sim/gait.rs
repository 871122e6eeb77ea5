//! Trot gait schedule and foot placement.
//!
//! Diagonal pairs (LF+RH, RF+LH) alternate with a configurable duty factor
//! above 0.5, so at least two legs are always in stance. During each stance
//! phase the foot is pinned to one world point; swings follow a smooth
//! cycloid-like arc with zero velocity at both ends.

use nalgebra::Vector3;

use crate::leg::LegId;

use super::Trajectory;

/// Phase offset of each leg within the gait cycle (fraction of the period).
pub fn phase_offset(leg: LegId) -> f64 {
    match leg {
        LegId::LeftFront | LegId::RightHind => 0.0,
        LegId::RightFront | LegId::LeftHind => 0.5,
    }
}

#[derive(Debug, Clone)]
pub struct GaitSchedule {
    period: f64,
    duty: f64,
    swing_height: f64,
    /// Pinned world foot position per (leg, stance index); index k covers
    /// phase [k + offset, k + offset + duty) in cycle units.
    targets: Vec<Vec<Vector3<f64>>>,
    first_step: i64,
}

impl GaitSchedule {
    /// Precomputes stance targets over [0, duration] plus one cycle margin.
    pub fn new(
        trajectory: &Trajectory,
        period: f64,
        duty: f64,
        swing_height: f64,
        nominal_foot_body: &dyn Fn(LegId) -> Vector3<f64>,
        duration: f64,
    ) -> GaitSchedule {
        let first_step = -2i64;
        let last_step = (duration / period).ceil() as i64 + 2;
        let mut targets = Vec::with_capacity(4);
        for leg in LegId::ALL {
            let offset = phase_offset(leg);
            let nominal = nominal_foot_body(leg);
            let mut per_leg = Vec::with_capacity((last_step - first_step + 1) as usize);
            for k in first_step..=last_step {
                // place the foot under the hip at mid-stance, yaw-aligned
                let t_mid = period * (k as f64 + offset + duty * 0.5);
                let gt = trajectory.sample(t_mid);
                let yaw = gt.yaw;
                let (s, c) = yaw.sin_cos();
                let rotated = Vector3::new(
                    c * nominal.x - s * nominal.y,
                    s * nominal.x + c * nominal.y,
                    0.0,
                );
                per_leg.push(Vector3::new(
                    gt.position.x + rotated.x,
                    gt.position.y + rotated.y,
                    0.0,
                ));
            }
            targets.push(per_leg);
        }
        GaitSchedule { period, duty, swing_height, targets, first_step }
    }

    fn target(&self, leg: LegId, step: i64) -> Vector3<f64> {
        let leg_idx = LegId::ALL.iter().position(|l| *l == leg).unwrap();
        let idx = (step - self.first_step).clamp(0, self.targets[leg_idx].len() as i64 - 1);
        self.targets[leg_idx][idx as usize]
    }

    /// Whether the leg is in stance at time t.
    pub fn in_contact(&self, leg: LegId, t: f64) -> bool {
        let phase = t / self.period - phase_offset(leg);
        let frac = phase - phase.floor();
        frac < self.duty
    }

    /// World foot position at time t: the pinned point during stance, the
    /// swing arc otherwise.
    pub fn foot_world(&self, leg: LegId, t: f64) -> Vector3<f64> {
        let phase = t / self.period - phase_offset(leg);
        let step = phase.floor() as i64;
        let frac = phase - phase.floor();
        if frac < self.duty {
            return self.target(leg, step);
        }
        // swing from this step's point to the next one
        let from = self.target(leg, step);
        let to = self.target(leg, step + 1);
        let s = (frac - self.duty) / (1.0 - self.duty);
        // quintic ease: zero velocity and acceleration at both ends
        let ease = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        let mut p = from + (to - from) * ease;
        p.z += self.swing_height * (std::f64::consts::PI * ease).sin();
        p
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn duty(&self) -> f64 {
        self.duty
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    fn static_schedule() -> GaitSchedule {
        let traj = Trajectory::static_pose(Pose::identity(), 0.4);
        GaitSchedule::new(
            &traj,
            0.8,
            0.6,
            0.06,
            &|leg| match leg {
                LegId::LeftFront => Vector3::new(0.3, 0.3, 0.0),
                LegId::RightFront => Vector3::new(0.3, -0.3, 0.0),
                LegId::LeftHind => Vector3::new(-0.3, 0.3, 0.0),
                LegId::RightHind => Vector3::new(-0.3, -0.3, 0.0),
            },
            10.0,
        )
    }

    #[test]
    fn stationary_base_pins_feet() {
        let sched = static_schedule();
        // during one stance phase the foot must not move at all
        let f0 = sched.foot_world(LegId::LeftFront, 0.01);
        let f1 = sched.foot_world(LegId::LeftFront, 0.45);
        assert_eq!(f0, f1);
        assert_eq!(f0.z, 0.0);
    }

    #[test]
    fn contact_coverage_at_duty_06() {
        let sched = static_schedule();
        // a 0.6-duty trot always has at least two legs in stance
        for k in 0..1000 {
            let t = 10.0 * k as f64 / 1000.0;
            let n = LegId::ALL.iter().filter(|l| sched.in_contact(**l, t)).count();
            assert!(n >= 2, "only {n} legs in stance at t = {t}");
        }
    }

    #[test]
    fn swing_lifts_and_lands_smoothly() {
        let sched = static_schedule();
        let leg = LegId::LeftFront;
        // stance of step 0 ends at 0.48; swing until 0.8
        let before = sched.foot_world(leg, 0.4799);
        let start = sched.foot_world(leg, 0.48001);
        assert!((before - start).norm() < 1e-3);
        let mid = sched.foot_world(leg, 0.64);
        assert!(mid.z > 0.02, "swing apex {}", mid.z);
        let end = sched.foot_world(leg, 0.7999);
        let next = sched.foot_world(leg, 0.8001);
        assert!((end - next).norm() < 1e-3);
        assert!(end.z.abs() < 1e-3);
    }
}
