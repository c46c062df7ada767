//! Experiment configuration: a TOML file with the unit in every key name.

use std::path::Path;

use nalgebra::DVector;
use serde::Deserialize;

use crate::chain::{ChainModel, ImuMount, JointSpec};
use crate::control::{GainSearch, PlantConfig, TrackingSetup};
use crate::error::{Error, Result};
use crate::fusion::bias_ekf::BiasEkfConfig;
use crate::fusion::stream::FilterConfig;
use crate::fusion::velocity_kf::VelocityKfConfig;
use crate::imu_sim::{BaseMotion, NoiseConfig, SineAxis, TrajectoryConfig};
use crate::so3::{Rotation, Vec3};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub chain: ChainSection,
    #[serde(default)]
    pub noise: NoiseSection,
    pub trajectory: TrajectorySection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub filter: FilterSection,
    #[serde(default)]
    pub control: ControlSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    #[serde(default)]
    pub floating_base: bool,
    pub joints: Vec<JointSection>,
    pub imus: Vec<ImuSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSection {
    pub name: String,
    /// Joint center in the parent frame.
    pub origin_m: [f64; 3],
    #[serde(default)]
    pub rest_rotvec_rad: [f64; 3],
    /// Unit rotation axes, applied in order.
    pub axes: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuSection {
    pub link: usize,
    pub position_m: [f64; 3],
    #[serde(default)]
    pub orientation_rotvec_rad: [f64; 3],
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub gyro_noise_rad_s: f64,
    pub gyro_bias_walk_rad_s_sqrt_s: f64,
    pub initial_gyro_bias_rad_s: f64,
    pub accel_noise_m_s2: f64,
    pub accel_bias_m_s2: f64,
    pub joint_noise_rad: f64,
    pub base_orientation_noise_rad: f64,
    pub sample_rate_hz: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseConfig::default();
        Self {
            gyro_noise_rad_s: n.gyro_noise,
            gyro_bias_walk_rad_s_sqrt_s: n.gyro_bias_walk,
            initial_gyro_bias_rad_s: n.initial_gyro_bias,
            accel_noise_m_s2: n.accel_noise,
            accel_bias_m_s2: n.accel_bias,
            joint_noise_rad: n.joint_noise,
            base_orientation_noise_rad: n.base_orientation_noise,
            sample_rate_hz: n.sample_rate_hz,
        }
    }
}

/// `offset + amplitude * sin(2 pi f t + phase)`; amplitude and offset carry
/// the unit of the enclosing key.
#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SineSection {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase_rad: f64,
    pub offset: f64,
}

impl From<SineSection> for SineAxis {
    fn from(s: SineSection) -> Self {
        SineAxis::new(s.amplitude, s.frequency_hz, s.phase_rad, s.offset)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySection {
    pub duration_s: f64,
    pub joints_rad: Vec<SineSection>,
    #[serde(default)]
    pub base_euler_rad: [SineSection; 3],
    #[serde(default)]
    pub base_translation_m: [SineSection; 3],
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub duration_s: f64,
    pub cutoff_hz: f64,
    /// Locked joint pose; zeros when absent.
    pub pose_rad: Option<Vec<f64>>,
    /// Leading samples averaged for a gyro bias estimate; zero disables.
    pub startup_bias_samples: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { duration_s: 10.0, cutoff_hz: crate::calib::DEFAULT_CUTOFF_HZ, pose_rad: None, startup_bias_samples: 0 }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub ekf: EkfSection,
    pub kf: KfSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EkfSection {
    pub gyro_noise_rad_s: f64,
    pub bias_walk_rad_s_sqrt_s: f64,
    pub joint_noise_rad: f64,
    pub base_orientation_noise_rad: f64,
    pub initial_variance: f64,
    pub variance_ceiling: f64,
}

impl Default for EkfSection {
    fn default() -> Self {
        let c = BiasEkfConfig::default();
        Self {
            gyro_noise_rad_s: c.gyro_noise,
            bias_walk_rad_s_sqrt_s: c.bias_walk,
            joint_noise_rad: c.joint_noise,
            base_orientation_noise_rad: c.base_orientation_noise,
            initial_variance: c.initial_variance,
            variance_ceiling: c.variance_ceiling,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KfSection {
    pub joint_noise_rad: f64,
    pub gyro_noise_rad_s: f64,
    pub accel_noise_rad_s2: f64,
    pub initial_variance: f64,
    pub variance_ceiling: f64,
}

impl Default for KfSection {
    fn default() -> Self {
        let c = VelocityKfConfig::default();
        Self {
            joint_noise_rad: c.joint_noise,
            gyro_noise_rad_s: c.gyro_noise,
            accel_noise_rad_s2: c.accel_noise,
            initial_variance: c.initial_variance,
            variance_ceiling: c.variance_ceiling,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    pub inertia_kg_m2: f64,
    pub damping_n_m_s: f64,
    pub torque_limit_n_m: f64,
    pub actuator_lag_s: f64,
    pub sample_rate_hz: f64,
    pub delay_samples: usize,
    pub reference_amplitude_rad: f64,
    pub reference_frequency_hz: f64,
    pub gyro_noise_rad_s: f64,
    pub joint_noise_rad: f64,
    pub cutoff_hz: f64,
    pub duration_s: f64,
    pub transient_s: f64,
    pub scenarios: Vec<ScenarioSection>,
    /// P sweep at fixed D.
    pub p_search: Option<SearchSection>,
    /// D sweep at fixed P.
    pub d_search: Option<SearchSection>,
}

impl Default for ControlSection {
    fn default() -> Self {
        let s = TrackingSetup::default();
        Self {
            inertia_kg_m2: s.plant.inertia,
            damping_n_m_s: s.plant.damping,
            torque_limit_n_m: s.plant.torque_limit,
            actuator_lag_s: s.plant.actuator_lag,
            sample_rate_hz: s.plant.sample_rate_hz,
            delay_samples: s.plant.delay_samples,
            reference_amplitude_rad: s.reference.amplitude,
            reference_frequency_hz: s.reference.frequency_hz,
            gyro_noise_rad_s: s.noise.gyro_noise,
            joint_noise_rad: s.noise.joint_noise,
            cutoff_hz: s.cutoff_hz,
            duration_s: s.duration,
            transient_s: s.transient,
            scenarios: vec![ScenarioSection { name: "p1000_d12".into(), p_n_m_rad: 1000.0, d_n_m_s_rad: 12.0, frequency_hz: None }],
            p_search: None,
            d_search: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub name: String,
    pub p_n_m_rad: f64,
    pub d_n_m_s_rad: f64,
    /// Overrides the reference frequency.
    #[serde(default)]
    pub frequency_hz: Option<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// The other gain, held constant during the sweep.
    pub fixed: f64,
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
}

impl SearchSection {
    pub fn grid(&self) -> GainSearch {
        GainSearch { lower: self.lower, upper: self.upper, step: self.step }
    }
}

fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

fn finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{what} must be finite")))
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{what} must be > 0, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        self.noise().validate()?;
        let t = &self.trajectory;
        positive("trajectory.duration_s", t.duration_s)?;
        if t.joints_rad.len() != model.joint_dof() {
            return Err(Error::InvalidConfig(format!(
                "trajectory.joints_rad has {} entries but the chain has {} joint coordinates",
                t.joints_rad.len(),
                model.joint_dof()
            )));
        }
        let sines = t.joints_rad.iter().chain(&t.base_euler_rad).chain(&t.base_translation_m);
        finite("trajectory", sines.flat_map(|s| [s.amplitude, s.frequency_hz, s.phase_rad, s.offset]))?;
        let c = &self.calibration;
        positive("calibration.duration_s", c.duration_s)?;
        positive("calibration.cutoff_hz", c.cutoff_hz)?;
        if let Some(pose) = &c.pose_rad {
            if pose.len() != model.joint_dof() {
                return Err(Error::InvalidConfig(format!("calibration.pose_rad needs {} entries", model.joint_dof())));
            }
            finite("calibration.pose_rad", pose.iter().copied())?;
        }
        let f = &self.filter;
        finite(
            "filter",
            [
                f.ekf.gyro_noise_rad_s,
                f.ekf.bias_walk_rad_s_sqrt_s,
                f.ekf.joint_noise_rad,
                f.ekf.base_orientation_noise_rad,
                f.kf.joint_noise_rad,
                f.kf.gyro_noise_rad_s,
                f.kf.accel_noise_rad_s2,
            ],
        )?;
        positive("filter.ekf.initial_variance", f.ekf.initial_variance)?;
        positive("filter.kf.initial_variance", f.kf.initial_variance)?;
        let ctl = &self.control;
        self.tracking_setup().plant.validate()?;
        positive("control.duration_s", ctl.duration_s)?;
        positive("control.cutoff_hz", ctl.cutoff_hz)?;
        if !(ctl.transient_s >= 0.0 && ctl.transient_s < ctl.duration_s) {
            return Err(Error::InvalidConfig("control.transient_s must lie in [0, duration_s)".into()));
        }
        for s in &ctl.scenarios {
            finite("control.scenarios gains", [s.p_n_m_rad, s.d_n_m_s_rad])?;
            if let Some(f) = s.frequency_hz {
                positive("control.scenarios.frequency_hz", f)?;
            }
        }
        for search in ctl.p_search.iter().chain(&ctl.d_search) {
            positive("search step", search.step)?;
            if search.upper < search.lower {
                return Err(Error::InvalidConfig("search upper bound below lower bound".into()));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ChainModel> {
        let joints = self
            .chain
            .joints
            .iter()
            .map(|j| {
                JointSpec::new(
                    j.name.clone(),
                    vec3(j.origin_m),
                    Rotation::exp(&vec3(j.rest_rotvec_rad)),
                    j.axes.iter().map(|a| vec3(*a)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mounts = self
            .chain
            .imus
            .iter()
            .map(|m| ImuMount { link: m.link, position: vec3(m.position_m), orientation: Rotation::exp(&vec3(m.orientation_rotvec_rad)) })
            .collect();
        ChainModel::new(joints, mounts, self.chain.floating_base)
    }

    pub fn noise(&self) -> NoiseConfig {
        let n = &self.noise;
        NoiseConfig {
            gyro_noise: n.gyro_noise_rad_s,
            gyro_bias_walk: n.gyro_bias_walk_rad_s_sqrt_s,
            initial_gyro_bias: n.initial_gyro_bias_rad_s,
            accel_noise: n.accel_noise_m_s2,
            accel_bias: n.accel_bias_m_s2,
            joint_noise: n.joint_noise_rad,
            base_orientation_noise: n.base_orientation_noise_rad,
            sample_rate_hz: n.sample_rate_hz,
            seed: self.seed,
        }
    }

    pub fn trajectory(&self) -> TrajectoryConfig {
        let t = &self.trajectory;
        TrajectoryConfig {
            joints: t.joints_rad.iter().map(|&s| s.into()).collect(),
            base: BaseMotion { euler: t.base_euler_rad.map(Into::into), translation: t.base_translation_m.map(Into::into) },
            duration: t.duration_s,
        }
    }

    pub fn calibration_pose(&self, model: &ChainModel) -> DVector<f64> {
        match &self.calibration.pose_rad {
            Some(p) => DVector::from_column_slice(p),
            None => DVector::zeros(model.joint_dof()),
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        let (e, k) = (&self.filter.ekf, &self.filter.kf);
        FilterConfig {
            ekf: BiasEkfConfig {
                gyro_noise: e.gyro_noise_rad_s,
                bias_walk: e.bias_walk_rad_s_sqrt_s,
                joint_noise: e.joint_noise_rad,
                base_orientation_noise: e.base_orientation_noise_rad,
                initial_variance: e.initial_variance,
                variance_ceiling: e.variance_ceiling,
            },
            kf: VelocityKfConfig {
                joint_noise: k.joint_noise_rad,
                gyro_noise: k.gyro_noise_rad_s,
                accel_noise: k.accel_noise_rad_s2,
                initial_variance: k.initial_variance,
                variance_ceiling: k.variance_ceiling,
            },
        }
    }

    pub fn tracking_setup(&self) -> TrackingSetup {
        let c = &self.control;
        TrackingSetup {
            plant: PlantConfig {
                inertia: c.inertia_kg_m2,
                damping: c.damping_n_m_s,
                torque_limit: c.torque_limit_n_m,
                actuator_lag: c.actuator_lag_s,
                sample_rate_hz: c.sample_rate_hz,
                delay_samples: c.delay_samples,
            },
            reference: SineAxis::new(c.reference_amplitude_rad, c.reference_frequency_hz, 0.0, 0.0),
            noise: NoiseConfig {
                gyro_noise: c.gyro_noise_rad_s,
                joint_noise: c.joint_noise_rad,
                sample_rate_hz: c.sample_rate_hz,
                seed: self.seed,
                ..NoiseConfig::default()
            },
            cutoff_hz: c.cutoff_hz,
            duration: c.duration_s,
            transient: c.transient_s,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        [chain]
        floating_base = false
        joints = [{ name = "knee", origin_m = [0.0, 0.0, -0.4], axes = [[0.0, 1.0, 0.0]] }]
        imus = [
            { link = 0, position_m = [0.05, 0.0, -0.2] },
            { link = 1, position_m = [0.04, 0.0, -0.2], orientation_rotvec_rad = [0.1, 0.0, 0.0] },
        ]
        [trajectory]
        duration_s = 2.0
        joints_rad = [{ amplitude = 0.3, frequency_hz = 1.0 }]
    "#;

    #[test]
    fn minimal_config_loads_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let model = cfg.model().unwrap();
        assert_eq!(model.joint_dof(), 1);
        assert_eq!(cfg.noise().seed, 3);
        assert_eq!(cfg.noise().sample_rate_hz, 1000.0);
        assert_eq!(cfg.tracking_setup(), TrackingSetup { noise: NoiseConfig { seed: 3, ..TrackingSetup::default().noise }, ..TrackingSetup::default() });
        assert_eq!(cfg.filter_config(), FilterConfig::default());
    }

    #[test]
    fn dof_mismatch_is_rejected() {
        let text = MINIMAL.replace("joints_rad = [{ amplitude = 0.3, frequency_hz = 1.0 }]", "joints_rad = []");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn keys_without_units_are_rejected() {
        let text = MINIMAL.replace("duration_s = 2.0", "duration = 2.0");
        assert!(matches!(ExperimentConfig::from_toml_str(&text), Err(Error::InvalidConfig(_))));
    }
}
