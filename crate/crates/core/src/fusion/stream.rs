//! Batch driver running one of the filters over a recorded log.

use nalgebra::DVector;

use super::bias_ekf::{bias_ekf_step, estimated_rates, BiasEkfConfig, BiasEkfMean, BiasEkfState, EkfMeasurement};
use super::velocity_kf::{velocity_kf_step, velocity_measurement_covariance, AccelSource, KfMeasurement, VelocityKfConfig, VelocityKfState};
use crate::calib::MountCalibration;
use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::estimator::{chain_accelerations, joint_velocities_constrained, link_gyros, LinkRates};
use crate::imu_sim::SimFrame;
use crate::so3::{Rotation, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterMode {
    BiasEkf,
    VelocityKf(AccelSource),
}

impl FilterMode {
    pub fn tag(self) -> &'static str {
        match self {
            FilterMode::BiasEkf => "bias_ekf",
            FilterMode::VelocityKf(AccelSource::Desired) => "kf_desired",
            FilterMode::VelocityKf(AccelSource::Accelerometer) => "kf_accelerometer",
            FilterMode::VelocityKf(AccelSource::Zero) => "kf_zero",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "bias_ekf" => Some(FilterMode::BiasEkf),
            _ => tag.strip_prefix("kf_").and_then(AccelSource::from_tag).map(FilterMode::VelocityKf),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterConfig {
    pub ekf: BiasEkfConfig,
    pub kf: VelocityKfConfig,
}

/// Sensor data of one time step. IMU readings are indexed by mount.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSample {
    pub time: f64,
    pub gyros: Vec<Vec3>,
    pub accels: Vec<Vec3>,
    pub joint_positions: DVector<f64>,
    pub base_orientation: Option<Rotation>,
    /// Commanded joint accelerations, when known.
    pub desired_acceleration: Option<DVector<f64>>,
}

impl StreamSample {
    /// Sensor view of a simulated frame; the true joint accelerations stand
    /// in for the commanded ones.
    pub fn from_frame(model: &ChainModel, frame: &SimFrame) -> Self {
        let nb = model.base_dof();
        Self {
            time: frame.time(),
            gyros: frame.imu.iter().map(|s| s.gyro).collect(),
            accels: frame.imu.iter().map(|s| s.accel).collect(),
            joint_positions: frame.joint_positions.clone(),
            base_orientation: frame.base_orientation,
            desired_acceleration: Some(frame.truth.state.accelerations.rows(nb, model.joint_dof()).into_owned()),
        }
    }

    fn primary_gyros(&self, model: &ChainModel) -> Vec<Vec3> {
        (0..model.link_count()).map(|l| self.gyros[model.mount_index(l, 0).expect("every link has an IMU")]).collect()
    }
}

/// One filter output record.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub time: f64,
    pub positions: DVector<f64>,
    pub velocities: DVector<f64>,
    /// Per-link stacked gyro biases (bias filter only).
    pub biases: Option<DVector<f64>>,
}

fn check_sample(model: &ChainModel, s: &StreamSample) -> Result<()> {
    let imus = model.mounts().len();
    if s.gyros.len() != imus || s.accels.len() != imus || s.joint_positions.len() != model.joint_dof() {
        return Err(Error::InvalidInput("sample does not match the model".into()));
    }
    Ok(())
}

/// Runs the selected filter over `samples`, producing one estimate per
/// sample. The time step is taken from consecutive timestamps.
pub fn filter_stream(
    model: &ChainModel,
    calibration: &MountCalibration,
    samples: &[StreamSample],
    mode: FilterMode,
    config: &FilterConfig,
) -> Result<Vec<Estimate>> {
    let Some(first) = samples.first() else {
        return Ok(Vec::new());
    };
    let wrap = |step: usize| move |e: Error| Error::Step { step, source: Box::new(e) };
    check_sample(model, first).map_err(wrap(0))?;
    match mode {
        FilterMode::BiasEkf => run_ekf(model, calibration, samples, &config.ekf),
        FilterMode::VelocityKf(source) => run_kf(model, calibration, samples, source, &config.kf),
    }
}

fn step_dt(samples: &[StreamSample], k: usize) -> f64 {
    if k == 0 {
        samples.get(1).map_or(1.0, |s| s.time - samples[0].time)
    } else {
        samples[k].time - samples[k - 1].time
    }
}

fn run_ekf(model: &ChainModel, calibration: &MountCalibration, samples: &[StreamSample], config: &BiasEkfConfig) -> Result<Vec<Estimate>> {
    let nb = model.base_dof();
    let first = &samples[0];
    let mean = BiasEkfMean {
        base_orientation: first.base_orientation.unwrap_or_else(Rotation::identity),
        positions: first.joint_positions.clone(),
        biases: DVector::zeros(3 * model.link_count()),
    };
    let mut state = BiasEkfState::new(model, mean, config);
    let mut out = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let wrap = |e: Error| Error::Step { step: k, source: Box::new(e) };
        check_sample(model, s).map_err(wrap)?;
        let gyros = link_gyros(model, &s.primary_gyros(model), calibration).map_err(wrap)?;
        let meas = EkfMeasurement { gyros: &gyros, joint_positions: &s.joint_positions, base_orientation: s.base_orientation };
        state = bias_ekf_step(&state, &meas, model, config, step_dt(samples, k)).map_err(wrap)?;
        let rates = estimated_rates(model, &state.mean, &gyros).map_err(wrap)?;
        out.push(Estimate {
            time: s.time,
            positions: state.mean.positions.clone(),
            velocities: rates.rows(nb, model.joint_dof()).into_owned(),
            biases: Some(state.mean.biases.clone()),
        });
    }
    Ok(out)
}

fn run_kf(
    model: &ChainModel,
    calibration: &MountCalibration,
    samples: &[StreamSample],
    source: AccelSource,
    config: &VelocityKfConfig,
) -> Result<Vec<Estimate>> {
    let nb = model.base_dof();
    let nq = model.joint_dof();
    let mut state: Option<VelocityKfState> = None;
    let mut previous_base: Option<Vec3> = None;
    let mut out = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        let wrap = |e: Error| Error::Step { step: k, source: Box::new(e) };
        check_sample(model, s).map_err(wrap)?;
        let dt = step_dt(samples, k);
        let q = &s.joint_positions;
        let solve = joint_velocities_constrained(model, q, &s.primary_gyros(model), calibration).map_err(wrap)?;
        let qd = solve.velocities.rows(nb, nq).into_owned();
        let accel = match source {
            AccelSource::Zero => DVector::zeros(nq),
            AccelSource::Desired => {
                let missing = || wrap(Error::InvalidInput("no desired acceleration in sample".into()));
                let now = s.desired_acceleration.as_ref().ok_or_else(missing)?;
                // Average over the prediction interval.
                match k.checked_sub(1).and_then(|p| samples[p].desired_acceleration.as_ref()) {
                    Some(before) => (now + before) * 0.5,
                    None => now.clone(),
                }
            }
            AccelSource::Accelerometer => {
                let base_rates = model.floating_base().then(|| {
                    let w = Vec3::new(solve.velocities[0], solve.velocities[1], solve.velocities[2]);
                    let alpha = previous_base.map_or(Vec3::zeros(), |p| (w - p) / dt);
                    previous_base = Some(w);
                    LinkRates { angular_velocity: w, angular_acceleration: alpha }
                });
                chain_accelerations(model, q, &solve.velocities, base_rates, &s.accels, calibration).map_err(wrap)?.coordinates
            }
        };
        let next = match &state {
            None => VelocityKfState::new(q.clone(), qd.clone(), source, config),
            Some(prev) => {
                let cov = velocity_measurement_covariance(model, q, config.gyro_noise).map_err(wrap)?;
                let meas = KfMeasurement { positions: q, velocities: &qd, velocity_covariance: &cov };
                velocity_kf_step(prev, &meas, &accel, config, dt).map_err(wrap)?
            }
        };
        out.push(Estimate { time: s.time, positions: next.positions(), velocities: next.velocities(), biases: None });
        state = Some(next);
    }
    Ok(out)
}
