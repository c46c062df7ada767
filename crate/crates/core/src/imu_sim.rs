//! Ground-truth chain motion and synthetic gyroscope / accelerometer
//! measurements with random-walk gyro biases and white sensor noise.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chain::{BaseTranslation, ChainModel, JointSpec, JointState};
use crate::rng::{self, streams, SimRng};
use crate::so3::{Rotation, Vec3};

/// Standard gravity vector, m/s^2 (z up).
pub const GRAVITY: Vec3 = Vec3::new(0.0, 0.0, -9.81);

/// Sensor noise and sampling configuration. Thermal noise values are
/// per-sample standard deviations; the bias walk is a density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Gyro white noise, rad/s (per sample, per axis).
    pub gyro_noise: f64,
    /// Gyro bias random-walk density, rad/s per sqrt(s).
    pub gyro_bias_walk: f64,
    /// Magnitude of the initial gyro bias of each IMU, rad/s.
    pub initial_gyro_bias: f64,
    /// Accelerometer white noise, m/s^2.
    pub accel_noise: f64,
    /// Magnitude of the constant accelerometer bias of each IMU, m/s^2.
    pub accel_bias: f64,
    /// Joint position sensor noise, rad.
    pub joint_noise: f64,
    /// Base orientation sensor noise, rad (floating base only).
    pub base_orientation_noise: f64,
    pub sample_rate_hz: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 0.0,
            gyro_bias_walk: 0.0,
            initial_gyro_bias: 0.0,
            accel_noise: 0.0,
            accel_bias: 0.0,
            joint_noise: 0.0,
            base_orientation_noise: 0.0,
            sample_rate_hz: 1000.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn validate(&self) -> crate::Result<()> {
        let densities = [
            self.gyro_noise,
            self.gyro_bias_walk,
            self.initial_gyro_bias,
            self.accel_noise,
            self.accel_bias,
            self.joint_noise,
            self.base_orientation_noise,
        ];
        if densities.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(crate::Error::InvalidConfig("noise levels must be finite and >= 0".into()));
        }
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(crate::Error::InvalidConfig("sample rate must be > 0".into()));
        }
        Ok(())
    }
}

/// One synchronized IMU reading in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub time: f64,
    pub link: usize,
    /// Mount slot on the link (0 or 1).
    pub mount: usize,
    pub gyro: Vec3,
    pub accel: Vec3,
    /// True gyro bias, when known (simulation only).
    pub bias: Option<Vec3>,
}

/// `offset + amplitude * sin(2 pi f t + phase)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SineAxis {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
    pub offset: f64,
}

impl SineAxis {
    pub fn constant(offset: f64) -> Self {
        Self { offset, ..Self::default() }
    }

    pub fn new(amplitude: f64, frequency_hz: f64, phase: f64, offset: f64) -> Self {
        Self { amplitude, frequency_hz, phase, offset }
    }

    /// Value and first two derivatives at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let w = 2.0 * std::f64::consts::PI * self.frequency_hz;
        let arg = w * t + self.phase;
        let (s, c) = arg.sin_cos();
        (self.offset + self.amplitude * s, self.amplitude * w * c, -self.amplitude * w * w * s)
    }
}

/// Base motion: ZYX Euler-angle sines for orientation plus per-axis
/// sines for the base origin position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaseMotion {
    /// Yaw (z), pitch (y), roll (x), applied in that order.
    pub euler: [SineAxis; 3],
    pub translation: [SineAxis; 3],
}

impl BaseMotion {
    pub fn fixed() -> Self {
        Self::default()
    }

    fn euler_joint() -> JointSpec {
        JointSpec::new("base", Vec3::zeros(), Rotation::identity(), vec![Vec3::z(), Vec3::y(), Vec3::x()])
            .expect("static axes")
    }

    /// World-from-base rotation, body angular velocity and acceleration.
    pub fn orientation(&self, t: f64) -> (Rotation, Vec3, Vec3) {
        let mut q = [0.0; 3];
        let mut qd = [0.0; 3];
        let mut qdd = [0.0; 3];
        for k in 0..3 {
            (q[k], qd[k], qdd[k]) = self.euler[k].eval(t);
        }
        let m = Self::euler_joint().relative_motion(&q, &qd, &qdd);
        (m.rotation, m.angular_velocity, m.angular_acceleration)
    }

    pub fn translation(&self, t: f64) -> BaseTranslation {
        let mut out = BaseTranslation::default();
        for k in 0..3 {
            let (p, v, a) = self.translation[k].eval(t);
            out.position[k] = p;
            out.velocity[k] = v;
            out.acceleration[k] = a;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryConfig {
    /// One sine per joint coordinate.
    pub joints: Vec<SineAxis>,
    pub base: BaseMotion,
    pub duration: f64,
}

impl TrajectoryConfig {
    pub fn validate(&self, model: &ChainModel) -> crate::Result<()> {
        if !(self.duration > 0.0) {
            return Err(crate::Error::InvalidConfig("trajectory duration must be > 0".into()));
        }
        if self.joints.len() != model.joint_dof() {
            return Err(crate::Error::InvalidConfig(format!(
                "trajectory has {} joint sines, chain has {} joint coordinates",
                self.joints.len(),
                model.joint_dof()
            )));
        }
        Ok(())
    }

    /// Number of samples at `rate_hz` covering `[0, duration)`.
    pub fn sample_count(&self, rate_hz: f64) -> usize {
        (self.duration * rate_hz).round() as usize
    }
}

/// Ground truth at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSample {
    pub time: f64,
    pub state: JointState,
    pub base: BaseTranslation,
}

/// Analytic joint state (and base motion) of a sine trajectory at `t`.
pub fn sine_trajectory(model: &ChainModel, cfg: &TrajectoryConfig, t: f64) -> MotionSample {
    let n = model.joint_dof();
    let b = model.base_dof();
    let mut state = JointState::zeros(model);
    for (k, axis) in cfg.joints.iter().enumerate().take(n) {
        let (p, v, a) = axis.eval(t);
        state.positions[k] = p;
        state.velocities[b + k] = v;
        state.accelerations[b + k] = a;
    }
    let (rotation, w, dw) = cfg.base.orientation(t);
    state.base_orientation = rotation;
    if b == 3 {
        state.velocities.fixed_rows_mut::<3>(0).copy_from(&w);
        state.accelerations.fixed_rows_mut::<3>(0).copy_from(&dw);
    }
    MotionSample { time: t, state, base: cfg.base.translation(t) }
}

/// Per-IMU bias state of the simulated sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorBiases {
    pub gyro: Vec<Vec3>,
    pub accel: Vec<Vec3>,
}

impl SensorBiases {
    pub fn zeros(count: usize) -> Self {
        Self { gyro: vec![Vec3::zeros(); count], accel: vec![Vec3::zeros(); count] }
    }

    /// Random directions scaled to the configured magnitudes.
    pub fn initial(count: usize, noise: &NoiseConfig, rng: &mut SimRng) -> Self {
        let mut draw = |magnitude: f64| {
            let v = normal3(rng);
            if magnitude == 0.0 || v.norm() == 0.0 {
                Vec3::zeros()
            } else {
                v.normalize() * magnitude
            }
        };
        let gyro = (0..count).map(|_| draw(noise.initial_gyro_bias)).collect();
        let accel = (0..count).map(|_| draw(noise.accel_bias)).collect();
        Self { gyro, accel }
    }
}

pub(crate) fn normal3(rng: &mut impl Rng) -> Vec3 {
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal))
}

/// Gyro and accelerometer readings of every IMU for one motion sample.
///
/// Readings are specific force and angular rate in the sensor frame, with
/// bias and noise added after rotation into the sensor frame.
pub fn synthesize_imu(
    model: &ChainModel,
    motion: &MotionSample,
    noise: &NoiseConfig,
    biases: &SensorBiases,
    gravity: &Vec3,
    rng: &mut SimRng,
) -> Vec<ImuSample> {
    let links = model.link_motions(&motion.state, &motion.base);
    model
        .mounts()
        .iter()
        .enumerate()
        .map(|(idx, mount)| {
            let link = &links[mount.link];
            let (_, acc_world) = link.point(&mount.position);
            let sensor_from_link = mount.orientation.transpose();
            let sensor_from_world = sensor_from_link * link.rotation.transpose();
            let gyro_noise = normal3(rng) * noise.gyro_noise;
            let accel_noise = normal3(rng) * noise.accel_noise;
            ImuSample {
                time: motion.time,
                link: mount.link,
                mount: model.mount_slot(idx),
                gyro: sensor_from_link * link.angular_velocity + biases.gyro[idx] + gyro_noise,
                accel: sensor_from_world * (acc_world - gravity) + biases.accel[idx] + accel_noise,
                bias: Some(biases.gyro[idx]),
            }
        })
        .collect()
}

/// Brownian bias step: `b + sigma * sqrt(dt) * n`.
pub fn step_bias(bias: &Vec3, sigma: f64, dt: f64, rng: &mut impl Rng) -> Vec3 {
    bias + normal3(rng) * (sigma * dt.sqrt())
}

/// Locked-joint tumble for pose calibration: joints frozen at `pose`, the
/// base rotating about all three axes with non-commensurate frequencies.
pub fn calibration_motion(model: &ChainModel, pose: &DVector<f64>, duration: f64, rng: &mut SimRng) -> TrajectoryConfig {
    let mut phase = || rng.random_range(0.0..std::f64::consts::TAU);
    let euler = [
        SineAxis::new(1.2, 0.31, phase(), 0.0),
        SineAxis::new(0.6, 0.43, phase(), 0.0),
        SineAxis::new(0.9, 0.53, phase(), 0.0),
    ];
    let translation = [
        SineAxis::new(0.10, 0.70, phase(), 0.0),
        SineAxis::new(0.08, 0.37, phase(), 0.0),
        SineAxis::new(0.12, 0.59, phase(), 1.0),
    ];
    TrajectoryConfig {
        joints: (0..model.joint_dof()).map(|k| SineAxis::constant(pose[k])).collect(),
        base: BaseMotion { euler, translation },
        duration,
    }
}

/// One time step of a simulated log.
#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub truth: MotionSample,
    pub imu: Vec<ImuSample>,
    /// Measured joint coordinates.
    pub joint_positions: DVector<f64>,
    /// Measured world-from-base rotation (floating base only).
    pub base_orientation: Option<Rotation>,
}

impl SimFrame {
    pub fn time(&self) -> f64 {
        self.truth.time
    }

    /// Reading of IMU `slot` on `link`.
    pub fn imu_on(&self, link: usize, slot: usize) -> Option<&ImuSample> {
        self.imu.iter().find(|s| s.link == link && s.mount == slot)
    }
}

/// Deterministic measurement generator for one chain.
#[derive(Clone, Debug)]
pub struct Simulator<'a> {
    pub model: &'a ChainModel,
    pub noise: NoiseConfig,
    pub gravity: Vec3,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a ChainModel, noise: NoiseConfig) -> Self {
        Self { model, noise, gravity: GRAVITY }
    }

    pub fn with_gravity(mut self, gravity: Vec3) -> Self {
        self.gravity = gravity;
        self
    }

    pub fn run(&self, traj: &TrajectoryConfig) -> Vec<SimFrame> {
        let seed = self.noise.seed;
        let mut bias_rng = rng::stream(seed, streams::INITIAL_BIAS);
        let mut noise_rng = rng::stream(seed, streams::GYRO_NOISE);
        let mut walk_rng = rng::stream(seed, streams::BIAS_WALK);
        let mut joint_rng = rng::stream(seed, streams::JOINT_NOISE);
        let count = self.model.mounts().len();
        let mut biases = SensorBiases::initial(count, &self.noise, &mut bias_rng);
        let dt = self.noise.dt();
        let samples = traj.sample_count(self.noise.sample_rate_hz);
        let mut frames = Vec::with_capacity(samples);
        for k in 0..samples {
            let t = k as f64 * dt;
            let truth = sine_trajectory(self.model, traj, t);
            let imu = synthesize_imu(self.model, &truth, &self.noise, &biases, &self.gravity, &mut noise_rng);
            let joint_positions = truth
                .state
                .positions
                .map(|q| q + self.noise.joint_noise * joint_rng.sample::<f64, _>(StandardNormal));
            let base_orientation = self.model.floating_base().then(|| {
                truth.state.base_orientation * Rotation::exp(&(normal3(&mut joint_rng) * self.noise.base_orientation_noise))
            });
            frames.push(SimFrame { truth, imu, joint_positions, base_orientation });
            for b in biases.gyro.iter_mut() {
                *b = step_bias(b, self.noise.gyro_bias_walk, dt, &mut walk_rng);
            }
        }
        frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ImuMount;
    use nalgebra::DMatrix;
    use rand::SeedableRng;

    pub(crate) fn leg() -> ChainModel {
        let joints = vec![
            JointSpec::new("hip", Vec3::new(0.0, -0.1, -0.1), Rotation::identity(), vec![Vec3::z(), Vec3::x(), Vec3::y()])
                .unwrap(),
            JointSpec::new("knee", Vec3::new(0.0, 0.0, -0.4), Rotation::identity(), vec![Vec3::y()]).unwrap(),
            JointSpec::new("ankle", Vec3::new(0.0, 0.0, -0.4), Rotation::identity(), vec![Vec3::y(), Vec3::x()]).unwrap(),
        ];
        let mounts = vec![
            ImuMount { link: 0, position: Vec3::new(0.05, 0.0, 0.0), orientation: Rotation::identity() },
            ImuMount { link: 1, position: Vec3::new(0.04, 0.0, -0.2), orientation: Rotation::exp(&Vec3::new(0.1, 0.0, 0.2)) },
            ImuMount { link: 2, position: Vec3::new(0.03, 0.02, -0.15), orientation: Rotation::identity() },
            ImuMount { link: 2, position: Vec3::new(-0.03, 0.04, -0.3), orientation: Rotation::identity() },
            ImuMount { link: 3, position: Vec3::new(0.06, 0.0, -0.05), orientation: Rotation::identity() },
        ];
        ChainModel::new(joints, mounts, true).unwrap()
    }

    fn sine_traj(model: &ChainModel) -> TrajectoryConfig {
        TrajectoryConfig {
            joints: (0..model.joint_dof())
                .map(|k| SineAxis::new(0.3, 0.4 + 0.1 * k as f64, 0.3 * k as f64, 0.1))
                .collect(),
            base: BaseMotion {
                euler: [SineAxis::new(0.5, 0.3, 0.1, 0.0), SineAxis::new(0.3, 0.45, 0.7, 0.0), SineAxis::new(0.4, 0.25, 1.1, 0.0)],
                translation: [SineAxis::new(0.1, 0.5, 0.0, 0.0), SineAxis::default(), SineAxis::new(0.05, 0.8, 0.2, 1.0)],
            },
            duration: 2.0,
        }
    }

    #[test]
    fn static_amplitude_is_constant() {
        let axis = SineAxis::new(0.0, 0.5, 0.3, 0.7);
        assert_eq!(axis.eval(1.234), (0.7, 0.0, -0.0));
    }

    #[test]
    fn paper_sine_initial_velocity() {
        let axis = SineAxis::new(0.25, 0.5, 0.0, 0.0);
        let (_, v, _) = axis.eval(0.0);
        assert!((v - 2.0 * std::f64::consts::PI * 0.5 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn sine_velocity_matches_finite_difference() {
        let axis = SineAxis::new(0.25, 0.5, 0.4, 0.1);
        let h = 1e-5;
        for k in 0..50 {
            let t = k as f64 * 0.13;
            let fd = (axis.eval(t + h).0 - axis.eval(t - h).0) / (2.0 * h);
            assert!((fd - axis.eval(t).1).abs() < 1e-6);
            let fd2 = (axis.eval(t + h).1 - axis.eval(t - h).1) / (2.0 * h);
            assert!((fd2 - axis.eval(t).2).abs() < 1e-6);
        }
    }

    #[test]
    fn static_chain_reads_gravity() {
        let model = leg();
        let mut traj = sine_traj(&model);
        traj.base = BaseMotion::fixed();
        traj.joints.iter_mut().for_each(|a| a.amplitude = 0.0);
        let motion = sine_trajectory(&model, &traj, 0.5);
        let mut rng = rng::stream(0, 0);
        let samples = synthesize_imu(&model, &motion, &NoiseConfig::default(), &SensorBiases::zeros(5), &GRAVITY, &mut rng);
        let links = model.link_motions(&motion.state, &motion.base);
        for (s, mount) in samples.iter().zip(model.mounts()) {
            assert_eq!(s.gyro, Vec3::zeros());
            let sensor_from_world = mount.orientation.transpose() * links[mount.link].rotation.transpose();
            assert!((s.accel - sensor_from_world * (-GRAVITY)).norm() < 1e-12);
            assert!((s.accel.norm() - 9.81).abs() < 1e-12);
        }
        // Upright base IMU reads +g on its z axis.
        assert!((samples[0].accel - Vec3::new(0.0, 0.0, 9.81)).norm() < 1e-12);
    }

    #[test]
    fn rigid_tumble_gyros_agree() {
        let model = leg();
        let pose = DVector::from_fn(model.joint_dof(), |k, _| 0.1 * k as f64);
        let traj = calibration_motion(&model, &pose, 5.0, &mut rng::stream(1, 0));
        let motion = sine_trajectory(&model, &traj, 1.7);
        let samples =
            synthesize_imu(&model, &motion, &NoiseConfig::default(), &SensorBiases::zeros(5), &GRAVITY, &mut rng::stream(0, 0));
        let base = samples[0].gyro;
        for (s, mount) in samples.iter().zip(model.mounts()) {
            let in_link = mount.orientation * s.gyro;
            let expected = model.relative_rotation(&pose, 0, mount.link) * base;
            assert!((in_link - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn accelerometer_matches_double_differentiation() {
        let model = leg();
        let traj = sine_traj(&model);
        let h = 1e-3;
        let noise = NoiseConfig::default();
        let biases = SensorBiases::zeros(5);
        for k in 1..8 {
            let t = 0.2 * k as f64;
            let pos = |t: f64| {
                let m = sine_trajectory(&model, &traj, t);
                let links = model.link_motions(&m.state, &m.base);
                model.mounts().iter().map(|mt| links[mt.link].point(&mt.position).0).collect::<Vec<_>>()
            };
            let (p0, pp, pm) = (pos(t), pos(t + h), pos(t - h));
            let motion = sine_trajectory(&model, &traj, t);
            let links = model.link_motions(&motion.state, &motion.base);
            let samples = synthesize_imu(&model, &motion, &noise, &biases, &GRAVITY, &mut rng::stream(0, 0));
            for (i, mount) in model.mounts().iter().enumerate() {
                let acc_fd = (pp[i] - 2.0 * p0[i] + pm[i]) / (h * h);
                let sensor_from_world = mount.orientation.transpose() * links[mount.link].rotation.transpose();
                let expected = sensor_from_world * (acc_fd - GRAVITY);
                assert!((samples[i].accel - expected).norm() < 1e-4, "imu {i}: {}", (samples[i].accel - expected).norm());
            }
        }
    }

    #[test]
    fn bias_walk_noiseless_and_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let b = Vec3::new(0.1, -0.2, 0.3);
        assert_eq!(step_bias(&b, 0.0, 0.01, &mut rng), b);
        let (sigma, dt) = (0.02, 0.004);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let d = step_bias(&Vec3::zeros(), sigma, dt, &mut rng).x;
            assert!(d.is_finite());
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!((var / (sigma * sigma * dt) - 1.0).abs() < 0.05, "ratio {}", var / (sigma * sigma * dt));
    }

    #[test]
    fn calibration_motion_is_locked_and_exciting() {
        let model = leg();
        let pose = DVector::from_fn(model.joint_dof(), |k, _| 0.05 * k as f64);
        let traj = calibration_motion(&model, &pose, 10.0, &mut rng::stream(7, streams::CALIBRATION_MOTION));
        let frames = Simulator::new(&model, NoiseConfig::default()).run(&traj);
        for f in &frames {
            assert_eq!(f.truth.state.positions, pose);
        }
        let m = frames.len();
        let rows = DMatrix::from_fn(m, 3, |i, j| frames[i].imu[0].gyro[j]);
        let sv = rows.svd(false, false).singular_values;
        let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min / (m as f64).sqrt() > 0.1, "weakest excitation {}", min / (m as f64).sqrt());
    }

    #[test]
    fn simulator_is_deterministic() {
        let model = leg();
        let noise = NoiseConfig { gyro_noise: 0.01, gyro_bias_walk: 0.01, initial_gyro_bias: 0.05, accel_noise: 0.1, joint_noise: 1e-3, seed: 42, ..Default::default() };
        let mut traj = sine_traj(&model);
        traj.duration = 0.3;
        let a = Simulator::new(&model, noise).run(&traj);
        let b = Simulator::new(&model, noise).run(&traj);
        assert_eq!(a, b);
    }

    #[test]
    fn static_accel_norm_averages_to_gravity() {
        let model = leg();
        let mut traj = sine_traj(&model);
        traj.base = BaseMotion::fixed();
        traj.joints.iter_mut().for_each(|a| a.amplitude = 0.0);
        traj.duration = 2.0;
        let sigma = 0.02;
        let noise = NoiseConfig { accel_noise: sigma, seed: 5, ..Default::default() };
        let frames = Simulator::new(&model, noise).run(&traj);
        let m = frames.len() as f64;
        let mean = frames.iter().map(|f| f.imu[0].accel.norm()).sum::<f64>() / m;
        assert!((mean - 9.81).abs() < 3.0 * sigma / m.sqrt(), "mean {mean}");
    }
}
