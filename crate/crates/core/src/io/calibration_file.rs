//! Calibration result file: one `[[imu]]` table per mount.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calib::{ImuCalibration, MountCalibration};
use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::so3::{Mat3, Rotation, Vec3};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    imu: Vec<ImuEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImuEntry {
    link: usize,
    slot: usize,
    /// Link-from-sensor rotation, row-major.
    rotation: [f64; 9],
    position_m: [f64; 3],
    position_base_m: [f64; 3],
    orientation_residual_rad_s: f64,
    orientation_excitation_rad_s: f64,
    position_residual_m_s2: f64,
    position_condition: f64,
}

const MAX_ORTHONORMALITY_ERROR: f64 = 1e-9;

pub fn calibration_to_string(cal: &MountCalibration) -> Result<String> {
    let file = CalibrationFile {
        imu: cal
            .imus
            .iter()
            .map(|c| {
                let m = c.orientation.matrix();
                ImuEntry {
                    link: c.link,
                    slot: c.slot,
                    rotation: std::array::from_fn(|k| m[(k / 3, k % 3)]),
                    position_m: c.position.into(),
                    position_base_m: c.position_base.into(),
                    orientation_residual_rad_s: c.orientation_residual,
                    orientation_excitation_rad_s: c.orientation_excitation,
                    position_residual_m_s2: c.position_residual,
                    position_condition: c.position_condition,
                }
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn calibration_from_str(text: &str, model: &ChainModel) -> Result<MountCalibration> {
    let file: CalibrationFile = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("calibration file: {}", e.message())))?;
    if file.imu.len() != model.mounts().len() {
        return Err(Error::InvalidInput(format!("calibration lists {} IMUs, model has {}", file.imu.len(), model.mounts().len())));
    }
    let imus = file
        .imu
        .into_iter()
        .enumerate()
        .map(|(idx, e)| {
            if e.link != model.mounts()[idx].link || e.slot != model.mount_slot(idx) {
                return Err(Error::InvalidInput(format!("calibration entry {idx} does not match the model's mount order")));
            }
            let orientation = Rotation::from_matrix_unchecked(Mat3::from_row_slice(&e.rotation));
            if orientation.orthonormality_error() > MAX_ORTHONORMALITY_ERROR || orientation.determinant() < 0.0 {
                return Err(Error::InvalidInput(format!("calibration entry {idx} is not a rotation")));
            }
            Ok(ImuCalibration {
                link: e.link,
                slot: e.slot,
                orientation,
                position_base: Vec3::from(e.position_base_m),
                position: Vec3::from(e.position_m),
                orientation_residual: e.orientation_residual_rad_s,
                orientation_excitation: e.orientation_excitation_rad_s,
                position_residual: e.position_residual_m_s2,
                position_condition: e.position_condition,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MountCalibration { imus })
}

pub fn write_calibration(path: &Path, cal: &MountCalibration) -> Result<()> {
    std::fs::write(path, calibration_to_string(cal)?)?;
    Ok(())
}

pub fn read_calibration(path: &Path, model: &ChainModel) -> Result<MountCalibration> {
    calibration_from_str(&std::fs::read_to_string(path)?, model)
}
