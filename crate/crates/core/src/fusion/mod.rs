//! Kalman filters fusing joint position sensing with inertial data, and the
//! Butterworth baseline filter.

pub mod bias_ekf;
pub mod butterworth;
pub mod stream;
pub mod velocity_kf;
