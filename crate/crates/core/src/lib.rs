//! Joint state estimation for serial kinematic chains instrumented with
//! link-mounted IMUs.
//!
//! The crate computes joint velocities from gyroscopes (a block-triangular
//! forward substitution and a kinematically constrained least-squares
//! solve), joint accelerations from pairs of accelerometers, calibrates IMU
//! mounting poses from locked-joint tumbling, fuses inertial data with joint
//! position sensing in Kalman filters and compares feedback pipelines in a
//! simulated PD tracking experiment.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod chain;
pub mod cli;
pub mod control;
pub mod error;
pub mod estimator;
pub mod fusion;
pub mod imu_sim;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod so3;

pub use error::{Error, Result};
