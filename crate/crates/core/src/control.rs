//! Single-joint PD sine tracking on a surrogate plant, comparing velocity
//! feedback pipelines.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::calib::MountCalibration;
use crate::chain::{BaseTranslation, ChainModel, ImuMount, JointSpec, JointState};
use crate::error::{Error, Result};
use crate::estimator::joint_velocities_constrained;
use crate::fusion::butterworth::{butterworth2_design, BiquadFilter};
use crate::fusion::velocity_kf::{velocity_kf_step, AccelSource, KfMeasurement, VelocityKfConfig, VelocityKfState};
use crate::imu_sim::{synthesize_imu, MotionSample, NoiseConfig, SensorBiases, SineAxis, GRAVITY};
use crate::metrics::rms;
use crate::rng::{self, streams};
use crate::so3::{Rotation, Vec3};

/// Rigid joint driven through a first-order actuator.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantConfig {
    /// kg m^2
    pub inertia: f64,
    /// N m s
    pub damping: f64,
    /// N m
    pub torque_limit: f64,
    /// Actuator time constant (s); zero for an ideal actuator.
    pub actuator_lag: f64,
    pub sample_rate_hz: f64,
    /// Samples between sensing and applying the resulting command.
    pub delay_samples: usize,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self { inertia: 0.5, damping: 0.1, torque_limit: 500.0, actuator_lag: 0.004, sample_rate_hz: 1000.0, delay_samples: 1 }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inertia > 0.0) || !(self.damping >= 0.0) || !(self.torque_limit > 0.0) || !(self.actuator_lag >= 0.0) || !(self.sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid plant: {self:?}")));
        }
        Ok(())
    }

    pub fn ideal(&self) -> Self {
        Self { actuator_lag: 0.0, delay_samples: 0, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gains {
    pub p: f64,
    pub d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VelocitySource {
    /// Differenced joint position, causal Butterworth low-pass.
    ButterworthNumeric,
    /// Constrained gyro solve on the two-link knee.
    GyroDirect,
    /// Velocity Kalman filter with the desired acceleration as input.
    KfFiltered,
}

impl VelocitySource {
    pub const ALL: [VelocitySource; 3] = [VelocitySource::ButterworthNumeric, VelocitySource::GyroDirect, VelocitySource::KfFiltered];

    pub fn tag(self) -> &'static str {
        match self {
            VelocitySource::ButterworthNumeric => "butterworth_numeric",
            VelocitySource::GyroDirect => "gyro_direct",
            VelocitySource::KfFiltered => "kf_filtered",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.tag() == tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainAxis {
    P,
    D,
}

/// Everything but the gains and the feedback source.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingSetup {
    pub plant: PlantConfig,
    pub reference: SineAxis,
    /// Joint position and gyro noise plus the seed; the rate is the plant's.
    pub noise: NoiseConfig,
    pub cutoff_hz: f64,
    pub duration: f64,
    pub transient: f64,
}

impl Default for TrackingSetup {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            reference: SineAxis::new(0.25, 0.5, 0.0, 0.0),
            noise: NoiseConfig { gyro_noise: 5e-3, joint_noise: 1e-4, ..NoiseConfig::default() },
            cutoff_hz: 25.0,
            duration: 5.0,
            transient: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    pub position_rms: f64,
    pub velocity_rms: f64,
    /// Velocity feedback error against the true joint velocity.
    pub feedback_rms: f64,
    pub stable: bool,
    pub gains: Gains,
    pub source: VelocitySource,
}

/// Per-sample signals of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackingTrace {
    pub time: Vec<f64>,
    pub reference: Vec<f64>,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub feedback_velocity: Vec<f64>,
    pub torque: Vec<f64>,
}

/// `P (q_ref - q) + D (qd_ref - qd)`, clamped to `+-limit`.
pub fn pd_step(q_ref: f64, qd_ref: f64, q_fb: f64, qd_fb: f64, gains: Gains, limit: f64) -> f64 {
    (gains.p * (q_ref - q_fb) + gains.d * (qd_ref - qd_fb)).clamp(-limit, limit)
}

/// Sensor readings available to a velocity pipeline at one sample.
#[derive(Clone, Debug)]
pub struct Sensed {
    pub position: f64,
    /// Gyro readings of the thigh and shank IMUs (sensor frames).
    pub gyros: [Vec3; 2],
    pub reference_acceleration: f64,
}

/// A velocity feedback pipeline.
pub trait VelocityFeedback {
    fn velocity(&mut self, sensed: &Sensed) -> Result<f64>;
}

/// Two-link fixed-base knee used for the gyro pipelines.
pub fn knee_model() -> ChainModel {
    let knee = JointSpec::new("knee", Vec3::new(0.0, 0.0, -0.4), Rotation::identity(), vec![Vec3::y()]).expect("valid joint");
    let mounts = vec![
        ImuMount { link: 0, position: Vec3::new(0.04, 0.0, -0.2), orientation: Rotation::exp(&Vec3::new(0.0, 0.0, 0.3)) },
        ImuMount { link: 1, position: Vec3::new(0.04, 0.0, -0.15), orientation: Rotation::exp(&Vec3::new(0.2, -0.1, 0.0)) },
    ];
    ChainModel::new(vec![knee], mounts, false).expect("valid chain")
}

struct NumericFeedback {
    filter: BiquadFilter,
    previous: Option<f64>,
    rate: f64,
}

impl VelocityFeedback for NumericFeedback {
    fn velocity(&mut self, sensed: &Sensed) -> Result<f64> {
        let raw = match self.previous {
            Some(p) => (sensed.position - p) * self.rate,
            None => {
                self.filter.settle(&[0.0]);
                0.0
            }
        };
        self.previous = Some(sensed.position);
        Ok(self.filter.step_scalar(0, raw))
    }
}

struct GyroFeedback {
    model: ChainModel,
    calibration: MountCalibration,
}

impl VelocityFeedback for GyroFeedback {
    fn velocity(&mut self, sensed: &Sensed) -> Result<f64> {
        let q = DVector::from_element(1, sensed.position);
        Ok(joint_velocities_constrained(&self.model, &q, &sensed.gyros, &self.calibration)?.velocities[0])
    }
}

struct KfFeedback {
    gyro: GyroFeedback,
    config: VelocityKfConfig,
    state: Option<VelocityKfState>,
    previous_accel: f64,
    dt: f64,
}

impl VelocityFeedback for KfFeedback {
    fn velocity(&mut self, sensed: &Sensed) -> Result<f64> {
        let v = self.gyro.velocity(sensed)?;
        let q = DVector::from_element(1, sensed.position);
        let qd = DVector::from_element(1, v);
        let next = match &self.state {
            None => VelocityKfState::new(q, qd, AccelSource::Desired, &self.config),
            Some(state) => {
                let cov = nalgebra::DMatrix::from_element(1, 1, self.config.gyro_noise * self.config.gyro_noise);
                let u = DVector::from_element(1, 0.5 * (sensed.reference_acceleration + self.previous_accel));
                velocity_kf_step(state, &KfMeasurement { positions: &q, velocities: &qd, velocity_covariance: &cov }, &u, &self.config, self.dt)?
            }
        };
        self.previous_accel = sensed.reference_acceleration;
        let out = next.velocities()[0];
        self.state = Some(next);
        Ok(out)
    }
}

/// The feedback pipeline behind a source tag.
pub fn feedback_pipeline(setup: &TrackingSetup, source: VelocitySource) -> Result<Box<dyn VelocityFeedback>> {
    let rate = setup.plant.sample_rate_hz;
    let model = knee_model();
    let calibration = MountCalibration::from_model(&model);
    Ok(match source {
        VelocitySource::ButterworthNumeric => {
            let biquad = butterworth2_design(setup.cutoff_hz, rate)?;
            Box::new(NumericFeedback { filter: BiquadFilter::new(biquad, 1), previous: None, rate })
        }
        VelocitySource::GyroDirect => Box::new(GyroFeedback { model, calibration }),
        VelocitySource::KfFiltered => Box::new(KfFeedback {
            gyro: GyroFeedback { model, calibration },
            config: VelocityKfConfig { gyro_noise: setup.noise.gyro_noise.max(1e-6), joint_noise: setup.noise.joint_noise.max(1e-6), ..VelocityKfConfig::default() },
            state: None,
            previous_accel: 0.0,
            dt: 1.0 / rate,
        }),
    })
}

/// Closed-loop simulation with a given feedback pipeline; `source` only tags
/// the result. The run is unstable when the position error leaves
/// `10 * max(amplitude, 0.05 rad)`, the torque saturates after the transient
/// or the error keeps growing over the evaluation window.
pub fn run_closed_loop(
    setup: &TrackingSetup,
    gains: Gains,
    source: VelocitySource,
    feedback: &mut dyn VelocityFeedback,
) -> Result<(TrackingResult, TrackingTrace)> {
    setup.plant.validate()?;
    let plant = &setup.plant;
    let dt = 1.0 / plant.sample_rate_hz;
    let steps = (setup.duration * plant.sample_rate_hz).round() as usize;
    let model = knee_model();
    let imu_noise = NoiseConfig { sample_rate_hz: plant.sample_rate_hz, ..setup.noise };
    let biases = SensorBiases::zeros(model.mounts().len());
    let mut noise_rng = rng::stream(setup.noise.seed, streams::CONTROL);

    let (q0, qd0, _) = setup.reference.eval(0.0);
    let (mut q, mut qd, mut torque) = (q0, qd0, 0.0);
    let mut pending: VecDeque<f64> = std::iter::repeat_n(0.0, plant.delay_samples).collect();
    let bound = 10.0 * setup.reference.amplitude.abs().max(0.05);
    let mut stable = true;
    let mut trace = TrackingTrace::default();
    const SUBSTEPS: usize = 10;
    let h = dt / SUBSTEPS as f64;

    for k in 0..steps {
        let t = k as f64 * dt;
        let (q_ref, qd_ref, qdd_ref) = setup.reference.eval(t);
        let mut state = JointState::zeros(&model);
        state.positions[0] = q;
        state.velocities[0] = qd;
        let motion = MotionSample { time: t, state, base: BaseTranslation::default() };
        let imu = synthesize_imu(&model, &motion, &imu_noise, &biases, &GRAVITY, &mut noise_rng);
        let position_noise: f64 = noise_rng.sample(StandardNormal);
        let sensed = Sensed {
            position: q + setup.noise.joint_noise * position_noise,
            gyros: [imu[0].gyro, imu[1].gyro],
            reference_acceleration: qdd_ref,
        };
        let qd_fb = feedback.velocity(&sensed)?;
        let command = pd_step(q_ref, qd_ref, sensed.position, qd_fb, gains, plant.torque_limit);
        // A saturated loop past the transient is a limit cycle, not tracking.
        if t >= setup.transient && command.abs() >= plant.torque_limit {
            stable = false;
        }
        pending.push_back(command);
        let applied = pending.pop_front().expect("queue holds delay + 1 commands");

        trace.time.push(t);
        trace.reference.push(q_ref);
        trace.position.push(q);
        trace.velocity.push(qd);
        trace.feedback_velocity.push(qd_fb);
        trace.torque.push(torque);

        for _ in 0..SUBSTEPS {
            if plant.actuator_lag > 0.0 {
                torque += (applied - torque) * (1.0 - (-h / plant.actuator_lag).exp());
            } else {
                torque = applied;
            }
            let qdd = (torque - plant.damping * qd) / plant.inertia;
            qd += h * qdd;
            q += h * qd;
        }
        if !(q.is_finite() && qd.is_finite()) || (q - setup.reference.eval(t + dt).0).abs() > bound {
            stable = false;
        }
        if !stable {
            break;
        }
    }

    let start = (setup.transient * plant.sample_rate_hz).round() as usize;
    if stable && error_grows(&trace, start) {
        stable = false;
    }
    let period = if setup.reference.frequency_hz > 0.0 { plant.sample_rate_hz / setup.reference.frequency_hz } else { 0.0 };
    let available = trace.time.len().saturating_sub(start);
    let window = if period >= 1.0 && available as f64 >= period {
        ((available as f64 / period).floor() * period).round() as usize
    } else {
        available
    };
    let range = start..start + window;
    let pos_err: Vec<f64> = range.clone().map(|k| trace.position[k] - trace.reference[k]).collect();
    let vel_err: Vec<f64> = range.clone().map(|k| trace.velocity[k] - setup.reference.eval(trace.time[k]).1).collect();
    let fb_err: Vec<f64> = range.map(|k| trace.feedback_velocity[k] - trace.velocity[k]).collect();
    let result = TrackingResult {
        position_rms: if stable { rms(&pos_err) } else { f64::INFINITY },
        velocity_rms: if stable { rms(&vel_err) } else { f64::INFINITY },
        feedback_rms: if stable { rms(&fb_err) } else { f64::INFINITY },
        stable,
        gains,
        source,
    };
    Ok((result, trace))
}

/// Position error RMS of the last quarter of the post-transient window
/// against the first quarter; a slowly diverging loop stays inside the
/// error bound for a short run but fails this test.
fn error_grows(trace: &TrackingTrace, start: usize) -> bool {
    const GROWTH: f64 = 2.0;
    const FLOOR: f64 = 1e-6;
    let n = trace.time.len();
    let quarter = n.saturating_sub(start) / 4;
    if quarter == 0 {
        return false;
    }
    let err_rms = |r: std::ops::Range<usize>| rms(&r.map(|k| trace.position[k] - trace.reference[k]).collect::<Vec<_>>());
    err_rms(n - quarter..n) > GROWTH * err_rms(start..start + quarter) + FLOOR
}

pub fn run_tracking_traced(setup: &TrackingSetup, gains: Gains, source: VelocitySource) -> Result<(TrackingResult, TrackingTrace)> {
    let mut feedback = feedback_pipeline(setup, source)?;
    run_closed_loop(setup, gains, source, feedback.as_mut())
}

pub fn run_tracking(setup: &TrackingSetup, gains: Gains, source: VelocitySource) -> Result<TrackingResult> {
    Ok(run_tracking_traced(setup, gains, source)?.0)
}

/// Search grid for [`find_gain_limit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GainSearch {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

/// Largest stable gain on the grid `lower, lower + step, ..., upper`,
/// assuming stability is monotone in the gain.
pub fn find_gain_limit(setup: &TrackingSetup, axis: GainAxis, fixed: f64, source: VelocitySource, search: GainSearch) -> Result<f64> {
    if !(search.step > 0.0) || !(search.upper >= search.lower) {
        return Err(Error::InvalidConfig(format!("invalid gain search {search:?}")));
    }
    let points = ((search.upper - search.lower) / search.step + 1e-9).floor() as usize;
    let gain_at = |i: usize| search.lower + i as f64 * search.step;
    let stable = |i: usize| -> Result<bool> {
        let g = gain_at(i);
        let gains = match axis {
            GainAxis::P => Gains { p: g, d: fixed },
            GainAxis::D => Gains { p: fixed, d: g },
        };
        Ok(run_tracking(setup, gains, source)?.stable)
    };
    if !stable(0)? {
        return Err(Error::NoStableGain { lower: search.lower });
    }
    if stable(points)? {
        return Ok(gain_at(points));
    }
    let (mut good, mut bad) = (0, points);
    while bad - good > 1 {
        let mid = (good + bad) / 2;
        if stable(mid)? {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Ok(gain_at(good))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pd_step_examples() {
        let g = Gains { p: 1000.0, d: 12.0 };
        assert_eq!(pd_step(0.3, 0.2, 0.3, 0.2, g, 100.0), 0.0);
        assert!((pd_step(0.01, 0.1, 0.0, 0.0, g, 100.0) - 11.2).abs() < 1e-12);
        assert_eq!(pd_step(10.0, 0.0, 0.0, 0.0, g, 100.0), 100.0);
        assert_eq!(pd_step(-10.0, 0.0, 0.0, 0.0, g, 100.0), -100.0);
    }

    #[test]
    fn zero_reference_regulates_to_rest() {
        let setup = TrackingSetup {
            reference: SineAxis::new(0.0, 0.5, 0.0, 0.0),
            noise: NoiseConfig::default(),
            ..TrackingSetup::default()
        };
        for source in VelocitySource::ALL {
            let r = run_tracking(&setup, Gains { p: 300.0, d: 10.0 }, source).unwrap();
            assert!(r.stable);
            assert!(r.position_rms < 1e-12 && r.velocity_rms < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn source_tag_does_not_change_results() {
        let setup = TrackingSetup::default();
        let gains = Gains { p: 500.0, d: 10.0 };
        let mut a = feedback_pipeline(&setup, VelocitySource::GyroDirect).unwrap();
        let mut b = feedback_pipeline(&setup, VelocitySource::GyroDirect).unwrap();
        let (ra, ta) = run_closed_loop(&setup, gains, VelocitySource::GyroDirect, a.as_mut()).unwrap();
        let (rb, tb) = run_closed_loop(&setup, gains, VelocitySource::ButterworthNumeric, b.as_mut()).unwrap();
        assert_eq!(ta, tb);
        assert_eq!((ra.position_rms, ra.velocity_rms, ra.stable), (rb.position_rms, rb.velocity_rms, rb.stable));
    }

    #[test]
    fn numeric_feedback_lags_gyro_feedback() {
        let setup = TrackingSetup { noise: NoiseConfig::default(), ..TrackingSetup::default() };
        let gains = Gains { p: 300.0, d: 10.0 };
        let (_, tn) = run_tracking_traced(&setup, gains, VelocitySource::ButterworthNumeric).unwrap();
        let (_, tg) = run_tracking_traced(&setup, gains, VelocitySource::GyroDirect).unwrap();
        let lag_numeric = crate::metrics::xcorr_lag(&tn.velocity[1000..], &tn.feedback_velocity[1000..], 100);
        let lag_gyro = crate::metrics::xcorr_lag(&tg.velocity[1000..], &tg.feedback_velocity[1000..], 100);
        assert!(lag_numeric > 0, "numeric lag {lag_numeric}");
        assert!(lag_gyro.abs() <= 1, "gyro lag {lag_gyro}");
    }

    #[test]
    fn unstable_lower_bound_is_an_error() {
        let setup = TrackingSetup::default();
        let search = GainSearch { lower: 1e6, upper: 2e6, step: 1e5 };
        let res = find_gain_limit(&setup, GainAxis::P, 12.0, VelocitySource::ButterworthNumeric, search);
        assert!(matches!(res, Err(Error::NoStableGain { .. })));
    }
}
