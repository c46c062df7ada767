//! Linear Kalman filter on joint positions and velocities driven by a joint
//! acceleration input.

use nalgebra::{DMatrix, DVector};

use super::bias_ekf::{check_covariance, joseph_update};
use crate::chain::ChainModel;
use crate::error::{Error, Result};

/// Where the acceleration input of the prediction comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccelSource {
    /// Acceleration of the commanded trajectory.
    Desired,
    /// Accelerometer-pair estimate.
    Accelerometer,
    /// No input: constant-velocity prediction.
    Zero,
}

impl AccelSource {
    pub fn tag(self) -> &'static str {
        match self {
            AccelSource::Desired => "desired",
            AccelSource::Accelerometer => "accelerometer",
            AccelSource::Zero => "zero",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "desired" => Some(AccelSource::Desired),
            "accelerometer" => Some(AccelSource::Accelerometer),
            "zero" => Some(AccelSource::Zero),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityKfConfig {
    /// Joint position sensor std (rad).
    pub joint_noise: f64,
    /// Per-sample gyro noise std (rad/s), propagated into the velocity
    /// pseudo-measurement.
    pub gyro_noise: f64,
    /// Std of the acceleration input error, held over one step (rad/s^2).
    pub accel_noise: f64,
    pub initial_variance: f64,
    pub variance_ceiling: f64,
}

impl Default for VelocityKfConfig {
    fn default() -> Self {
        Self { joint_noise: 1e-3, gyro_noise: 5e-3, accel_noise: 0.3, initial_variance: 1e-2, variance_ceiling: 1e6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityKfState {
    /// `[q; qdot]` over the joint coordinates.
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub source: AccelSource,
    pub time: f64,
}

impl VelocityKfState {
    pub fn new(positions: DVector<f64>, velocities: DVector<f64>, source: AccelSource, config: &VelocityKfConfig) -> Self {
        let n = positions.len();
        let mut mean = DVector::zeros(2 * n);
        mean.rows_mut(0, n).copy_from(&positions);
        mean.rows_mut(n, n).copy_from(&velocities);
        Self { mean, covariance: DMatrix::from_diagonal_element(2 * n, 2 * n, config.initial_variance), source, time: 0.0 }
    }

    pub fn dof(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn positions(&self) -> DVector<f64> {
        self.mean.rows(0, self.dof()).into_owned()
    }

    pub fn velocities(&self) -> DVector<f64> {
        self.mean.rows(self.dof(), self.dof()).into_owned()
    }
}

/// Joint-coordinate block of `sigma^2 (T_J^T T_J)^-1`: the covariance of the
/// least-squares joint velocities under white gyro noise.
pub fn velocity_measurement_covariance(model: &ChainModel, q: &DVector<f64>, gyro_noise: f64) -> Result<DMatrix<f64>> {
    let t = model.stacked_jacobian(q);
    let normal = t.transpose() * &t;
    let inv = normal.try_inverse().ok_or(Error::IllConditioned { condition: f64::INFINITY, rank: 0 })?;
    let nb = model.base_dof();
    let nq = model.joint_dof();
    Ok(inv.view((nb, nb), (nq, nq)) * (gyro_noise * gyro_noise))
}

#[derive(Clone, Debug)]
pub struct KfMeasurement<'a> {
    pub positions: &'a DVector<f64>,
    pub velocities: &'a DVector<f64>,
    /// Covariance of `velocities`.
    pub velocity_covariance: &'a DMatrix<f64>,
}

/// Predict over `dt` holding `accel` constant, then update with the full state.
pub fn velocity_kf_step(
    state: &VelocityKfState,
    meas: &KfMeasurement<'_>,
    accel: &DVector<f64>,
    config: &VelocityKfConfig,
    dt: f64,
) -> Result<VelocityKfState> {
    let n = state.dof();
    if meas.positions.len() != n || meas.velocities.len() != n || accel.len() != n || meas.velocity_covariance.shape() != (n, n) {
        return Err(Error::InvalidInput(format!("velocity filter expects {n} joint coordinates")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    let mut f = DMatrix::identity(2 * n, 2 * n);
    let mut q = DMatrix::zeros(2 * n, 2 * n);
    let s2 = config.accel_noise * config.accel_noise;
    let (g0, g1) = (0.5 * dt * dt, dt);
    for i in 0..n {
        f[(i, n + i)] = dt;
        q[(i, i)] = s2 * g0 * g0;
        q[(i, n + i)] = s2 * g0 * g1;
        q[(n + i, i)] = s2 * g0 * g1;
        q[(n + i, n + i)] = s2 * g1 * g1;
    }
    let mut mean = &f * &state.mean;
    for i in 0..n {
        mean[i] += g0 * accel[i];
        mean[n + i] += g1 * accel[i];
    }
    let p = &f * &state.covariance * f.transpose() + q;

    let mut r = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        r[(i, i)] = config.joint_noise * config.joint_noise;
    }
    r.view_mut((n, n), (n, n)).copy_from(meas.velocity_covariance);
    let mut innovation = DVector::zeros(2 * n);
    innovation.rows_mut(0, n).copy_from(&(meas.positions - mean.rows(0, n)));
    innovation.rows_mut(n, n).copy_from(&(meas.velocities - mean.rows(n, n)));
    let h = DMatrix::identity(2 * n, 2 * n);
    let (dx, p, _) = joseph_update(&p, &h, &r, &innovation);
    check_covariance(&p, config.variance_ceiling)?;
    Ok(VelocityKfState { mean: mean + dx, covariance: p, source: state.source, time: state.time + dt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::xcorr_lag;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn zero_noise() -> VelocityKfConfig {
        VelocityKfConfig { joint_noise: 0.0, gyro_noise: 0.0, accel_noise: 0.0, initial_variance: 0.0, variance_ceiling: 1e6 }
    }

    #[test]
    fn constant_acceleration_is_tracked_exactly() {
        let a = DVector::from_vec(vec![1.5, -0.7]);
        let v0 = DVector::from_vec(vec![0.2, 0.1]);
        let q0 = DVector::from_vec(vec![0.0, 0.3]);
        let config = VelocityKfConfig::default();
        let mut state = VelocityKfState::new(q0.clone(), v0.clone(), AccelSource::Desired, &config);
        let dt = 1e-3;
        let cov = DMatrix::from_diagonal_element(2, 2, 1e-4);
        for k in 1..=2000 {
            let t = k as f64 * dt;
            let q = &q0 + &v0 * t + &a * (0.5 * t * t);
            let v = &v0 + &a * t;
            state = velocity_kf_step(&state, &KfMeasurement { positions: &q, velocities: &v, velocity_covariance: &cov }, &a, &config, dt).unwrap();
            assert!((state.positions() - q).amax() < 1e-9);
            assert!((state.velocities() - v).amax() < 1e-9);
        }
    }

    #[test]
    fn zero_noise_sine_integrates_exactly() {
        let (amp, w) = (0.3, 2.0 * std::f64::consts::PI);
        let dt = 1e-3;
        let config = zero_noise();
        let mut state = VelocityKfState::new(DVector::from_element(1, 0.0), DVector::from_element(1, amp * w), AccelSource::Desired, &config);
        let cov = DMatrix::zeros(1, 1);
        let vel = |t: f64| amp * w * (w * t).cos();
        for k in 1..=10_000 {
            let t = k as f64 * dt;
            // Interval-average acceleration of the true trajectory.
            let u = DVector::from_element(1, (vel(t) - vel(t - dt)) / dt);
            let q = DVector::from_element(1, amp * (w * t).sin());
            let v = DVector::from_element(1, vel(t));
            state = velocity_kf_step(&state, &KfMeasurement { positions: &q, velocities: &v, velocity_covariance: &cov }, &u, &config, dt)
                .unwrap_or_else(|e| panic!("{e}"));
            assert!((state.positions()[0] - amp * (w * t).sin()).abs() < 1e-6);
            assert!((state.velocities()[0] - vel(t)).abs() < 1e-6);
        }
    }

    fn run_sine(source: AccelSource, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (amp, w) = (0.3, 2.0 * std::f64::consts::PI);
        let dt = 1e-3;
        let config = VelocityKfConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut state = VelocityKfState::new(DVector::zeros(1), DVector::from_element(1, amp * w), source, &config);
        let cov = DMatrix::from_element(1, 1, config.gyro_noise * config.gyro_noise);
        let (mut truth, mut est, mut raw) = (vec![], vec![], vec![]);
        for k in 1..5000 {
            let t = k as f64 * dt;
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let q = DVector::from_element(1, amp * (w * t).sin() + config.joint_noise * n1);
            let v = DVector::from_element(1, amp * w * (w * t).cos() + config.gyro_noise * n2);
            let u = match source {
                AccelSource::Zero => DVector::zeros(1),
                _ => DVector::from_element(1, -amp * w * w * (w * (t - 0.5 * dt)).sin()),
            };
            state = velocity_kf_step(&state, &KfMeasurement { positions: &q, velocities: &v, velocity_covariance: &cov }, &u, &config, dt).unwrap();
            truth.push(amp * w * (w * t).cos());
            est.push(state.velocities()[0]);
            raw.push(v[0]);
        }
        (truth, est, raw)
    }

    #[test]
    fn zero_input_lags_more_than_desired_input() {
        let (truth, desired, _) = run_sine(AccelSource::Desired, 1);
        let (_, zero, _) = run_sine(AccelSource::Zero, 1);
        let ld = xcorr_lag(&truth[1000..], &desired[1000..], 100);
        let lz = xcorr_lag(&truth[1000..], &zero[1000..], 100);
        assert!(ld >= 0 && lz > ld, "desired {ld} zero {lz}");
    }

    #[test]
    fn static_velocity_variance_is_reduced() {
        let config = VelocityKfConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut state = VelocityKfState::new(DVector::zeros(1), DVector::zeros(1), AccelSource::Zero, &config);
        let cov = DMatrix::from_element(1, 1, config.gyro_noise * config.gyro_noise);
        let (mut raw, mut est) = (vec![], vec![]);
        for _ in 0..5000 {
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let q = DVector::from_element(1, config.joint_noise * n1);
            let v = DVector::from_element(1, config.gyro_noise * n2);
            state = velocity_kf_step(&state, &KfMeasurement { positions: &q, velocities: &v, velocity_covariance: &cov }, &DVector::zeros(1), &config, 1e-3).unwrap();
            raw.push(v[0]);
            est.push(state.velocities()[0]);
        }
        let var = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!(var(&est[500..]) < var(&raw[500..]));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let config = VelocityKfConfig::default();
        let state = VelocityKfState::new(DVector::zeros(2), DVector::zeros(2), AccelSource::Zero, &config);
        let one = DVector::zeros(1);
        let cov = DMatrix::zeros(1, 1);
        let res = velocity_kf_step(&state, &KfMeasurement { positions: &one, velocities: &one, velocity_covariance: &cov }, &one, &config, 1e-3);
        assert!(matches!(res, Err(Error::InvalidInput(_))));
    }
}
