//! The velocity-composition matrix of the sample leg at t = 8.635 s has
//! tightly clustered singular values on which nalgebra's default SVD
//! iteration returns an inaccurate factorization.

use imujoint::calib::MountCalibration;
use imujoint::estimator::{joint_velocities_unconstrained, link_gyros, velocity_composition_matrix};
use imujoint::imu_sim::Simulator;
use imujoint::io::ExperimentConfig;
use imujoint::so3::{checked_svd, lstsq_svd, Vec3, DEFAULT_MAX_CONDITION};
use nalgebra::DVector;

#[test]
fn clustered_singular_values_are_factorized_accurately() {
    let cfg = ExperimentConfig::from_toml_str(include_str!("../../../configs/leg.toml")).unwrap();
    let model = cfg.model().unwrap();
    let frames = Simulator::new(&model, cfg.noise()).run(&cfg.trajectory());
    let f = frames.iter().find(|f| (f.time() - 8.635).abs() < 1e-9).unwrap();
    let q = &f.joint_positions;
    let t = velocity_composition_matrix(&model, q);

    let svd = checked_svd(&t);
    assert!((svd.recompose().unwrap() - &t).amax() < 1e-13);

    let cal = MountCalibration::from_model(&model);
    let gyros: Vec<Vec3> = (0..model.link_count()).map(|l| f.imu_on(l, 0).unwrap().gyro).collect();
    let w = link_gyros(&model, &gyros, &cal).unwrap();
    let w = DVector::from_iterator(3 * w.len(), w.iter().flat_map(|v| v.iter().copied()));
    let dense = lstsq_svd(&t, &w, DEFAULT_MAX_CONDITION).unwrap().solution;
    let forward = joint_velocities_unconstrained(&model, q, &gyros, &cal).unwrap().velocities;
    assert!((dense - forward).amax() < 1e-12);
}
