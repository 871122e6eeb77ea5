//! Visual-inertial odometry for quadruped robots with leg-kinematic constraints
//! whose weight adapts to the walking motion observed in the image stream.
//!
//! The crate bundles:
//! - [`geometry`]: quaternion/pose algebra and the estimator state types,
//! - [`imu`]: IMU preintegration between window frames,
//! - [`leg`]: 3-DOF leg forward kinematics and the contact-anchored residual,
//! - [`adaptive`]: the walking-motion-adaptive factor derived from feature motion,
//! - [`vision`]: feature tracks, triangulation, and reprojection residuals,
//! - [`estimator`]: the sliding-window optimizer with Schur-complement marginalization,
//! - [`sim`]: a synthetic trot-gait simulator producing ground truth and sensor streams,
//! - [`dataset`]: the line-oriented dataset format shared by simulator and estimator,
//! - [`eval`]: trajectory alignment and RMSE reporting.
//!
//! With the `parallel` feature (default) the residual linearization and batch
//! experiment runs fan out over a rayon pool; results are reduced in a fixed
//! order, so outputs are bitwise identical with and without it.

pub mod adaptive;
pub mod dataset;
pub mod estimator;
pub mod eval;
pub mod geometry;
pub mod imu;
pub mod leg;
pub mod parallel;
pub mod sim;
pub mod vision;
