//! Mounting orientation and position of every IMU from a locked-joint
//! tumbling log.

use nalgebra::{DMatrix, DVector};

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::fusion::butterworth::{butterworth2_design, filtfilt, warm_up_samples};
use crate::imu_sim::SimFrame;
use crate::so3::{self, skew, Rotation, SvdSolver, Vec3};

pub const DEFAULT_MIN_SAMPLES: usize = 200;
/// Largest joint excursion (rad) tolerated in a "locked" log.
pub const LOCKED_JOINT_TOLERANCE: f64 = 1e-3;
/// Orientation solve is rejected below this `sigma_2(A^T B) / M`, in (rad/s)^2.
pub const MIN_ORIENTATION_EXCITATION: f64 = 1e-3;
pub const MAX_POSITION_CONDITION: f64 = 1e4;
pub const DEFAULT_CUTOFF_HZ: f64 = 25.0;

/// Estimated mounting of one IMU.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuCalibration {
    pub link: usize,
    pub slot: usize,
    /// Link-from-sensor rotation applied to raw readings.
    pub orientation: Rotation,
    /// Position in the base link frame at the calibration pose.
    pub position_base: Vec3,
    /// Position in the IMU's own link frame.
    pub position: Vec3,
    pub orientation_residual: f64,
    pub orientation_excitation: f64,
    pub position_residual: f64,
    pub position_condition: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MountCalibration {
    pub imus: Vec<ImuCalibration>,
}

impl MountCalibration {
    /// The model's own mounting poses, zero residuals.
    pub fn from_model(model: &ChainModel) -> Self {
        let poses = model.base_frame_poses(&DVector::zeros(model.joint_dof()));
        let imus = model
            .mounts()
            .iter()
            .enumerate()
            .map(|(idx, m)| ImuCalibration {
                link: m.link,
                slot: model.mount_slot(idx),
                orientation: m.orientation,
                position_base: poses[m.link].1 + poses[m.link].0 * m.position,
                position: m.position,
                orientation_residual: 0.0,
                orientation_excitation: 0.0,
                position_residual: 0.0,
                position_condition: 0.0,
            })
            .collect();
        Self { imus }
    }

    pub fn orientation(&self, imu: usize) -> Rotation {
        self.imus[imu].orientation
    }

    pub fn position(&self, imu: usize) -> Vec3 {
        self.imus[imu].position
    }
}

/// Synchronized readings of every IMU (indexed by mount) over M steps.
#[derive(Clone, Debug)]
pub struct CalibrationLog {
    pub sample_rate_hz: f64,
    pub joint_positions: Vec<DVector<f64>>,
    pub gyros: Vec<Vec<Vec3>>,
    pub accels: Vec<Vec<Vec3>>,
}

impl CalibrationLog {
    pub fn from_frames(frames: &[SimFrame], sample_rate_hz: f64) -> Self {
        Self {
            sample_rate_hz,
            joint_positions: frames.iter().map(|f| f.joint_positions.clone()).collect(),
            gyros: frames.iter().map(|f| f.imu.iter().map(|s| s.gyro).collect()).collect(),
            accels: frames.iter().map(|f| f.imu.iter().map(|s| s.accel).collect()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.gyros.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gyros.is_empty()
    }

    /// Checks shapes, length and that the joints stayed locked.
    pub fn validate(&self, model: &ChainModel, min_samples: usize) -> Result<()> {
        let m = self.len();
        if m < min_samples.max(3) {
            return Err(Error::SignalTooShort { len: m, min: min_samples.max(3) });
        }
        let imus = model.mounts().len();
        if self.accels.len() != m
            || self.joint_positions.len() != m
            || self.gyros.iter().chain(&self.accels).any(|row| row.len() != imus)
            || self.joint_positions.iter().any(|q| q.len() != model.joint_dof())
        {
            return Err(Error::InvalidInput("calibration log shape does not match the model".into()));
        }
        let q0 = &self.joint_positions[0];
        let max_motion = self.joint_positions.iter().map(|q| (q - q0).amax()).fold(0.0, f64::max);
        if !(max_motion < LOCKED_JOINT_TOLERANCE) {
            return Err(Error::LockedJointViolation { max_motion });
        }
        Ok(())
    }

    /// Mean joint configuration over the log.
    pub fn pose(&self) -> DVector<f64> {
        let sum = self.joint_positions.iter().fold(DVector::zeros(self.joint_positions[0].len()), |acc, q| acc + q);
        sum / self.len() as f64
    }

    /// Removes constant gyro offsets (one per IMU), e.g. measured while
    /// the robot rested before the tumble.
    pub fn subtract_gyro_bias(&mut self, biases: &[Vec3]) {
        for row in self.gyros.iter_mut() {
            for (g, b) in row.iter_mut().zip(biases) {
                *g -= b;
            }
        }
    }

    /// Per-IMU mean gyro reading over the first `samples` steps.
    pub fn startup_gyro_bias(&self, samples: usize) -> Vec<Vec3> {
        let n = samples.clamp(1, self.len());
        let imus = self.gyros[0].len();
        (0..imus)
            .map(|i| self.gyros[..n].iter().fold(Vec3::zeros(), |acc, row| acc + row[i]) / n as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct OrientationFit {
    pub correction: Rotation,
    /// `|A X - B|_F / sqrt(M)`.
    pub residual: f64,
    /// `sigma_2(A^T B) / M`.
    pub excitation: f64,
}

/// Index of the reference IMU whose pose is known: the first IMU on the base.
const REFERENCE: usize = 0;

/// Rotational correction of one IMU from gyro readings, with the reference
/// IMU's pose taken from the model.
pub fn calibrate_orientation(log: &CalibrationLog, model: &ChainModel, imu: usize) -> Result<OrientationFit> {
    log.validate(model, DEFAULT_MIN_SAMPLES)?;
    orientation_fit(log, model, &log.pose(), imu)
}

fn orientation_fit(log: &CalibrationLog, model: &ChainModel, pose: &DVector<f64>, imu: usize) -> Result<OrientationFit> {
    if imu >= model.mounts().len() {
        return Err(Error::InvalidInput(format!("no IMU with index {imu}")));
    }
    if imu == REFERENCE {
        return Ok(OrientationFit { correction: model.mounts()[REFERENCE].orientation, residual: 0.0, excitation: f64::INFINITY });
    }
    let m = log.len();
    let reference = model.mounts()[REFERENCE].orientation;
    let to_link = model.relative_rotation(pose, 0, model.mounts()[imu].link) * reference;
    let a = DMatrix::from_fn(m, 3, |t, j| log.gyros[t][imu][j]);
    let mut b = DMatrix::zeros(m, 3);
    for t in 0..m {
        let w = to_link * log.gyros[t][REFERENCE];
        b.row_mut(t).copy_from(&w.transpose());
    }
    let (cross, second) = so3::kabsch_cross(&a, &b)?;
    let excitation = second / m as f64;
    let tolerance = MIN_ORIENTATION_EXCITATION.max(so3::truncation_tolerance(m, 3, cross.0) / m as f64);
    if !(excitation >= tolerance) {
        return Err(Error::RankDeficient { second: excitation, tolerance });
    }
    let x = so3::kabsch_from_cross(&cross.1);
    let residual = (&a * DMatrix::from_column_slice(3, 3, x.matrix().as_slice()) - &b).norm() / (m as f64).sqrt();
    Ok(OrientationFit { correction: x.transpose(), residual, excitation })
}

/// Orientation corrections for every IMU; positions are left at the model's.
pub fn calibrate_orientations(log: &CalibrationLog, model: &ChainModel) -> Result<MountCalibration> {
    log.validate(model, DEFAULT_MIN_SAMPLES)?;
    let pose = log.pose();
    let mut cal = MountCalibration::from_model(model);
    for (idx, entry) in cal.imus.iter_mut().enumerate() {
        let fit = orientation_fit(log, model, &pose, idx).map_err(|e| Error::Step { step: idx, source: Box::new(e) })?;
        entry.orientation = fit.correction;
        entry.orientation_residual = fit.residual;
        entry.orientation_excitation = fit.excitation;
    }
    Ok(cal)
}

/// Zero-phase second-order Butterworth filtering of a recorded signal.
pub fn zero_delay_filter(signal: &[f64], cutoff_hz: f64, sample_rate_hz: f64) -> Result<Vec<f64>> {
    let biquad = butterworth2_design(cutoff_hz, sample_rate_hz)?;
    let warm_up = warm_up_samples(cutoff_hz, sample_rate_hz);
    if signal.len() < 6 * warm_up {
        return Err(Error::SignalTooShort { len: signal.len(), min: 6 * warm_up });
    }
    Ok(filtfilt(&biquad, signal, 3 * warm_up))
}

pub fn zero_delay_filter_vec3(signal: &[Vec3], cutoff_hz: f64, sample_rate_hz: f64) -> Result<Vec<Vec3>> {
    let mut out = vec![Vec3::zeros(); signal.len()];
    for axis in 0..3 {
        let channel: Vec<f64> = signal.iter().map(|v| v[axis]).collect();
        for (o, y) in out.iter_mut().zip(zero_delay_filter(&channel, cutoff_hz, sample_rate_hz)?) {
            o[axis] = y;
        }
    }
    Ok(out)
}

/// Derivative of a uniformly sampled angular rate: a five-point stencil in
/// the interior, shorter differences near the ends. With a cutoff the rate is first
/// passed through [`zero_delay_filter_vec3`].
pub fn numeric_angular_accel(omega: &[Vec3], sample_rate_hz: f64, cutoff_hz: Option<f64>) -> Result<Vec<Vec3>> {
    let filtered;
    let w = match cutoff_hz {
        Some(fc) => {
            filtered = zero_delay_filter_vec3(omega, fc, sample_rate_hz)?;
            &filtered[..]
        }
        None => omega,
    };
    let n = w.len();
    if n < 2 {
        return Err(Error::SignalTooShort { len: n, min: 2 });
    }
    let fs = sample_rate_hz;
    Ok((0..n)
        .map(|k| match k {
            0 => (w[1] - w[0]) * fs,
            k if k == n - 1 => (w[n - 1] - w[n - 2]) * fs,
            k if k == 1 || k == n - 2 => (w[k + 1] - w[k - 1]) * (fs / 2.0),
            // Fourth-order five-point stencil.
            k => (w[k - 2] - w[k + 2] + (w[k + 1] - w[k - 1]) * 8.0) * (fs / 12.0),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PositionFit {
    pub base_frame: Vec3,
    pub link_frame: Vec3,
    /// RMS equation residual in m/s^2.
    pub residual: f64,
    pub condition: f64,
}

/// Stacked rigid-body system shared by all IMUs plus each IMU's right-hand side.
struct PositionSystem {
    lhs: DMatrix<f64>,
    rhs: Vec<DVector<f64>>,
    pose: DVector<f64>,
}

fn position_system(log: &CalibrationLog, model: &ChainModel, corrections: &MountCalibration, cutoff_hz: f64) -> Result<PositionSystem> {
    log.validate(model, DEFAULT_MIN_SAMPLES)?;
    let fs = log.sample_rate_hz;
    let pose = log.pose();
    let imus = model.mounts().len();
    let reference_rot = corrections.orientation(REFERENCE);

    let omega_raw: Vec<Vec3> = log.gyros.iter().map(|row| reference_rot * row[REFERENCE]).collect();
    let omega = zero_delay_filter_vec3(&omega_raw, cutoff_hz, fs)?;
    let alpha = numeric_angular_accel(&omega, fs, None)?;
    // Accelerations of every IMU in the base link frame, filtered the same way.
    let mut accels = Vec::with_capacity(imus);
    for idx in 0..imus {
        let to_base = model.relative_rotation(&pose, model.mounts()[idx].link, 0) * corrections.orientation(idx);
        let raw: Vec<Vec3> = log.accels.iter().map(|row| to_base * row[idx]).collect();
        accels.push(zero_delay_filter_vec3(&raw, cutoff_hz, fs)?);
    }

    let trim = warm_up_samples(cutoff_hz, fs);
    let rows: Vec<usize> = (trim..log.len() - trim).collect();
    let mut lhs = DMatrix::zeros(3 * rows.len(), 3);
    for (r, &t) in rows.iter().enumerate() {
        let s = skew(&omega[t]);
        lhs.fixed_view_mut::<3, 3>(3 * r, 0).copy_from(&(s * s + skew(&alpha[t])));
    }
    let rhs = (0..imus)
        .map(|idx| {
            DVector::from_iterator(
                3 * rows.len(),
                rows.iter().flat_map(|&t| (accels[idx][t] - accels[REFERENCE][t]).iter().copied().collect::<Vec<_>>()),
            )
        })
        .collect();
    Ok(PositionSystem { lhs, rhs, pose })
}

fn position_fit(model: &ChainModel, corrections: &MountCalibration, sys: &PositionSystem, solver: &SvdSolver, idx: usize) -> PositionFit {
    let rel = solver.solve(&sys.rhs[idx]);
    let rows = sys.lhs.nrows() / 3;
    let residual = (&sys.lhs * &rel - &sys.rhs[idx]).norm() / (rows as f64).sqrt();
    let base_frame = corrections.imus[REFERENCE].position_base + Vec3::new(rel[0], rel[1], rel[2]);
    let (rot, origin) = model.base_frame_poses(&sys.pose)[model.mounts()[idx].link];
    PositionFit { base_frame, link_frame: rot.transpose() * (base_frame - origin), residual, condition: solver.condition() }
}

fn full_condition(solver: &SvdSolver) -> f64 {
    let sv = solver.singular_values();
    let min = sv.min();
    if min > 0.0 {
        sv.max() / min
    } else {
        f64::INFINITY
    }
}

/// Positions of every IMU from accelerometer differences against the
/// reference IMU. The stacked left-hand matrix is factored once and shared.
///
/// `corrections` must already carry the orientation corrections.
pub fn calibrate_position(log: &CalibrationLog, model: &ChainModel, corrections: &MountCalibration, cutoff_hz: f64) -> Result<Vec<PositionFit>> {
    let sys = position_system(log, model, corrections, cutoff_hz)?;
    let solver = SvdSolver::new(&sys.lhs, MAX_POSITION_CONDITION)?;
    if solver.ill_conditioned() {
        return Err(Error::IllConditioned { condition: full_condition(&solver), rank: solver.rank() });
    }
    Ok((0..model.mounts().len()).map(|idx| position_fit(model, corrections, &sys, &solver, idx)).collect())
}

/// Same as [`calibrate_position`] but factoring the matrix separately for
/// every IMU.
pub fn calibrate_position_independent(
    log: &CalibrationLog,
    model: &ChainModel,
    corrections: &MountCalibration,
    cutoff_hz: f64,
) -> Result<Vec<PositionFit>> {
    let sys = position_system(log, model, corrections, cutoff_hz)?;
    (0..model.mounts().len())
        .map(|idx| {
            let solver = SvdSolver::new(&sys.lhs, MAX_POSITION_CONDITION)?;
            if solver.ill_conditioned() {
                return Err(Error::IllConditioned { condition: full_condition(&solver), rank: solver.rank() });
            }
            Ok(position_fit(model, corrections, &sys, &solver, idx))
        })
        .collect()
}

/// Orientation then position calibration of every IMU.
pub fn calibrate(log: &CalibrationLog, model: &ChainModel, cutoff_hz: f64) -> Result<MountCalibration> {
    let mut cal = calibrate_orientations(log, model)?;
    let fits = calibrate_position(log, model, &cal, cutoff_hz)?;
    apply_positions(&mut cal, &fits);
    Ok(cal)
}

pub fn apply_positions(cal: &mut MountCalibration, fits: &[PositionFit]) {
    for (entry, fit) in cal.imus.iter_mut().zip(fits) {
        entry.position_base = fit.base_frame;
        entry.position = fit.link_frame;
        entry.position_residual = fit.residual;
        entry.position_condition = fit.condition;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{ImuMount, JointSpec};
    use crate::imu_sim::{calibration_motion, BaseMotion, NoiseConfig, SineAxis, Simulator, TrajectoryConfig};
    use crate::rng;

    fn arm() -> ChainModel {
        let joints = vec![
            JointSpec::new("a", Vec3::new(0.0, 0.0, -0.3), Rotation::identity(), vec![Vec3::x(), Vec3::y()]).unwrap(),
            JointSpec::new("b", Vec3::new(0.0, 0.1, -0.3), Rotation::identity(), vec![Vec3::y()]).unwrap(),
        ];
        let mounts = vec![
            ImuMount { link: 0, position: Vec3::new(0.02, 0.0, 0.01), orientation: Rotation::exp(&Vec3::new(0.0, 0.0, 0.3)) },
            ImuMount { link: 1, position: Vec3::new(0.04, 0.0, -0.2), orientation: Rotation::exp(&Vec3::new(0.4, -0.2, 0.9)) },
            ImuMount { link: 2, position: Vec3::new(0.03, 0.05, -0.15), orientation: Rotation::exp(&Vec3::new(-1.0, 0.5, 0.2)) },
        ];
        ChainModel::new(joints, mounts, true).unwrap()
    }

    fn log(model: &ChainModel, noise: NoiseConfig, seed: u64) -> CalibrationLog {
        let pose = DVector::from_vec(vec![0.3, -0.2, 0.5]);
        let traj = calibration_motion(model, &pose, 4.0, &mut rng::stream(seed, rng::streams::CALIBRATION_MOTION));
        let fs = noise.sample_rate_hz;
        CalibrationLog::from_frames(&Simulator::new(model, noise).run(&traj), fs)
    }

    #[test]
    fn recovers_orientations_noiseless() {
        let model = arm();
        let cal = calibrate_orientations(&log(&model, NoiseConfig::default(), 1), &model).unwrap();
        for (entry, mount) in cal.imus.iter().zip(model.mounts()) {
            assert!(entry.orientation.geodesic(&mount.orientation) < 1e-8);
            assert!(entry.orientation_residual < 1e-8);
        }
    }

    #[test]
    fn orientation_is_time_reversal_invariant() {
        let model = arm();
        let noise = NoiseConfig { gyro_noise: 5e-3, ..NoiseConfig::default() };
        let mut l = log(&model, noise, 2);
        let fwd = calibrate_orientation(&l, &model, 2).unwrap();
        l.gyros.reverse();
        l.accels.reverse();
        l.joint_positions.reverse();
        let back = calibrate_orientation(&l, &model, 2).unwrap();
        assert!(fwd.correction.geodesic(&back.correction) < 1e-10);
    }

    #[test]
    fn moving_joints_are_rejected() {
        let model = arm();
        let mut l = log(&model, NoiseConfig::default(), 3);
        l.joint_positions[500][1] += 0.01;
        assert!(matches!(calibrate_orientation(&l, &model, 1), Err(Error::LockedJointViolation { .. })));
    }

    fn spin_log(model: &ChainModel) -> CalibrationLog {
        let mut base = BaseMotion::fixed();
        // Constant yaw rate: offset moves linearly via a very slow, large sine.
        base.euler[0] = SineAxis::new(2000.0, 1e-4, 0.0, 0.0);
        let traj = TrajectoryConfig { joints: vec![SineAxis::constant(0.1); model.joint_dof()], base, duration: 2.0 };
        CalibrationLog::from_frames(&Simulator::new(model, NoiseConfig::default()).run(&traj), 1000.0)
    }

    #[test]
    fn single_axis_spin_is_degenerate() {
        let model = arm();
        let l = spin_log(&model);
        // Orientation needs two excited directions.
        assert!(matches!(calibrate_orientation(&l, &model, 1), Err(Error::RankDeficient { .. })));
        let cal = MountCalibration::from_model(&model);
        match calibrate_position(&l, &model, &cal, DEFAULT_CUTOFF_HZ) {
            Err(Error::IllConditioned { condition, .. }) => assert!(condition > MAX_POSITION_CONDITION),
            other => panic!("expected IllConditioned, got {other:?}"),
        }
    }

    #[test]
    fn recovers_positions_noiseless() {
        let model = arm();
        let l = log(&model, NoiseConfig::default(), 4);
        let cal = calibrate(&l, &model, DEFAULT_CUTOFF_HZ).unwrap();
        for (entry, mount) in cal.imus.iter().zip(model.mounts()) {
            assert!((entry.position - mount.position).norm() < 1e-6, "{:?} vs {:?}", entry.position, mount.position);
        }
        let shared = calibrate_position(&l, &model, &cal, DEFAULT_CUTOFF_HZ).unwrap();
        let single = calibrate_position_independent(&l, &model, &cal, DEFAULT_CUTOFF_HZ).unwrap();
        for (a, b) in shared.iter().zip(&single) {
            assert!((a.base_frame - b.base_frame).norm() < 1e-12);
        }
    }

    #[test]
    fn reference_offset_is_zero() {
        let model = arm();
        let l = log(&model, NoiseConfig::default(), 5);
        let cal = calibrate_orientations(&l, &model).unwrap();
        let fits = calibrate_position(&l, &model, &cal, DEFAULT_CUTOFF_HZ).unwrap();
        assert!((fits[0].base_frame - cal.imus[0].position_base).norm() < 1e-9);
    }

    #[test]
    fn zero_delay_filter_basics() {
        let fs = 1000.0;
        assert!(zero_delay_filter(&[1.0; 100], 25.0, fs).is_err());
        let c = zero_delay_filter(&[0.7; 400], 25.0, fs).unwrap();
        assert!(c.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let sine: Vec<f64> = (0..4000).map(|k| (2.0 * std::f64::consts::PI * 2.0 * k as f64 / fs).sin()).collect();
        let y = zero_delay_filter(&sine, 25.0, fs).unwrap();
        let peak = y[500..3500].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 0.01);
        assert!(y[500..3500].iter().zip(&sine[500..3500]).all(|(a, b)| (a - b).abs() < 0.01));
    }

    #[test]
    fn numeric_accel_of_ramp_and_constant() {
        let ramp: Vec<Vec3> = (0..50).map(|k| Vec3::new(0.5, 2.0 * k as f64 / 100.0, -1.0)).collect();
        let a = numeric_angular_accel(&ramp, 100.0, None).unwrap();
        for v in &a[1..49] {
            assert!((v - Vec3::new(0.0, 2.0, 0.0)).norm() < 1e-9);
        }
        let c = numeric_angular_accel(&[Vec3::new(1.0, 2.0, 3.0); 600], 1000.0, Some(25.0)).unwrap();
        assert!(c.iter().all(|v| v.norm() < 1e-9));
    }
}
