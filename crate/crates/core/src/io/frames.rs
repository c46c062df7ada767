//! Conversion between log records and per-timestep frames.

use nalgebra::DVector;

use super::log::{group_by_time, to_micros, LogRecord, Quantity, RecordKind};
use crate::calib::CalibrationLog;
use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::fusion::stream::{Estimate, StreamSample};
use crate::imu_sim::SimFrame;
use crate::so3::{Rotation, Vec3};

/// Records describing one simulated frame: every IMU, every measured joint
/// coordinate, the base orientation sensor and the true generalized state.
pub fn frame_records(model: &ChainModel, frame: &SimFrame) -> Vec<LogRecord> {
    let time_us = to_micros(frame.time());
    let rec = |kind, index, sub, values: Vec<f64>| LogRecord { time_us, kind, index, sub, values };
    let mut out = Vec::new();
    for s in &frame.imu {
        out.push(rec(RecordKind::Imu, s.link, s.mount, vec![s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z]));
    }
    for (k, q) in frame.joint_positions.iter().enumerate() {
        out.push(rec(RecordKind::JointPos, k, 0, vec![*q]));
    }
    if let Some(r) = frame.base_orientation {
        out.push(rec(RecordKind::BaseOrientation, 0, 0, r.log().as_slice().to_vec()));
    }
    let state = &frame.truth.state;
    let positions = state.stacked_positions(model);
    for k in 0..model.velocity_dim() {
        out.push(rec(RecordKind::Truth, k, 0, vec![positions[k], state.velocities[k], state.accelerations[k]]));
    }
    out
}

/// Records of one filter output. Positions and velocities are indexed by
/// generalized coordinate (joint `k` at `base_dof + k`), biases by
/// `3 * link + axis`.
pub fn estimate_records(model: &ChainModel, estimate: &Estimate) -> Vec<LogRecord> {
    let nb = model.base_dof();
    let time_us = to_micros(estimate.time);
    let rec = |index, q: Quantity, v: f64| LogRecord { time_us, kind: RecordKind::Estimate, index, sub: q.code(), values: vec![v] };
    let mut out = Vec::new();
    out.extend(estimate.positions.iter().enumerate().map(|(k, v)| rec(nb + k, Quantity::Position, *v)));
    out.extend(estimate.velocities.iter().enumerate().map(|(k, v)| rec(nb + k, Quantity::Velocity, *v)));
    if let Some(b) = &estimate.biases {
        out.extend(b.iter().enumerate().map(|(k, v)| rec(k, Quantity::Bias, *v)));
    }
    out
}

/// Everything logged at one timestamp, laid out for a given model.
#[derive(Clone, Debug, PartialEq)]
pub struct LoggedFrame {
    pub time_us: i64,
    /// Indexed by mount.
    pub gyros: Vec<Option<Vec3>>,
    pub accels: Vec<Option<Vec3>>,
    pub joint_positions: Vec<Option<f64>>,
    pub base_orientation: Option<Rotation>,
    /// Position, velocity, acceleration per generalized coordinate.
    pub truth: Vec<Option<[f64; 3]>>,
    pub estimates: Vec<LogRecord>,
}

impl LoggedFrame {
    fn new(model: &ChainModel, time_us: i64) -> Self {
        let imus = model.mounts().len();
        Self {
            time_us,
            gyros: vec![None; imus],
            accels: vec![None; imus],
            joint_positions: vec![None; model.joint_dof()],
            base_orientation: None,
            truth: vec![None; model.velocity_dim()],
            estimates: Vec::new(),
        }
    }

    pub fn from_records(model: &ChainModel, time_us: i64, records: Vec<LogRecord>) -> Result<Self> {
        let mut f = Self::new(model, time_us);
        let out_of_range = |r: &LogRecord| Error::InvalidInput(format!("{} record index {} out of range at t_us={}", r.kind.tag(), r.index, r.time_us));
        for r in records {
            let v = &r.values;
            match r.kind {
                RecordKind::Imu => {
                    let idx = model.mount_index(r.index, r.sub).ok_or_else(|| out_of_range(&r))?;
                    f.gyros[idx] = Some(Vec3::new(v[0], v[1], v[2]));
                    f.accels[idx] = Some(Vec3::new(v[3], v[4], v[5]));
                }
                RecordKind::JointPos => *f.joint_positions.get_mut(r.index).ok_or_else(|| out_of_range(&r))? = Some(v[0]),
                RecordKind::BaseOrientation => f.base_orientation = Some(Rotation::exp(&Vec3::new(v[0], v[1], v[2]))),
                RecordKind::Truth => *f.truth.get_mut(r.index).ok_or_else(|| out_of_range(&r))? = Some([v[0], v[1], v[2]]),
                RecordKind::Estimate => f.estimates.push(r),
            }
        }
        Ok(f)
    }

    pub fn time(&self) -> f64 {
        self.time_us as f64 * 1e-6
    }

    fn missing(&self, what: &str) -> Error {
        Error::InvalidInput(format!("missing {what} at t_us={}", self.time_us))
    }

    pub fn gyro_readings(&self) -> Result<Vec<Vec3>> {
        self.gyros.iter().map(|g| g.ok_or_else(|| self.missing("imu record"))).collect()
    }

    pub fn accel_readings(&self) -> Result<Vec<Vec3>> {
        self.accels.iter().map(|a| a.ok_or_else(|| self.missing("imu record"))).collect()
    }

    pub fn measured_positions(&self) -> Result<DVector<f64>> {
        let values = self.joint_positions.iter().map(|q| q.ok_or_else(|| self.missing("joint_pos record"))).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(values))
    }

    /// One component (0 position, 1 velocity, 2 acceleration) of the true
    /// state, if every coordinate was logged.
    pub fn truth_component(&self, component: usize) -> Option<DVector<f64>> {
        let values = self.truth.iter().map(|t| t.map(|t| t[component])).collect::<Option<Vec<_>>>()?;
        Some(DVector::from_vec(values))
    }

    /// Sensor view for the filters. The logged true joint accelerations
    /// stand in for the commanded ones when present.
    pub fn stream_sample(&self, model: &ChainModel) -> Result<StreamSample> {
        let nb = model.base_dof();
        Ok(StreamSample {
            time: self.time(),
            gyros: self.gyro_readings()?,
            accels: self.accel_readings()?,
            joint_positions: self.measured_positions()?,
            base_orientation: self.base_orientation,
            desired_acceleration: self.truth_component(2).map(|a| a.rows(nb, model.joint_dof()).into_owned()),
        })
    }
}

/// Collects all frames of a record stream.
pub fn collect_frames<I>(model: &ChainModel, records: I) -> Result<Vec<LoggedFrame>>
where
    I: Iterator<Item = Result<LogRecord>>,
{
    group_by_time(records).map(|g| g.and_then(|(t, recs)| LoggedFrame::from_records(model, t, recs))).collect()
}

pub fn calibration_log(frames: &[LoggedFrame], sample_rate_hz: f64) -> Result<CalibrationLog> {
    Ok(CalibrationLog {
        sample_rate_hz,
        joint_positions: frames.iter().map(LoggedFrame::measured_positions).collect::<Result<_>>()?,
        gyros: frames.iter().map(LoggedFrame::gyro_readings).collect::<Result<_>>()?,
        accels: frames.iter().map(LoggedFrame::accel_readings).collect::<Result<_>>()?,
    })
}
