//! Filter-free joint velocities from link gyroscopes and joint
//! accelerations from accelerometer pairs.

use nalgebra::{DMatrix, DVector};

use crate::calib::MountCalibration;
use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::so3::{self, skew, SvdSolver, Vec3};

/// Condition ceiling for the 6x3 acceleration system.
pub const MAX_ACCEL_CONDITION: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VelocityMethod {
    /// Every joint treated as 3-DoF; block forward substitution.
    Unconstrained,
    /// Least squares on the stacked angular Jacobians.
    Constrained,
}

#[derive(Clone, Debug)]
pub struct VelocitySolveReport {
    /// Unconstrained: one 3-vector of relative angular velocity (child
    /// frame) per link, the first being the base angular velocity.
    /// Constrained: generalized velocities `[omega_base; qdot]`.
    pub velocities: DVector<f64>,
    pub residual: Option<f64>,
    pub condition: Option<f64>,
    pub method: VelocityMethod,
}

/// Gyro readings of the primary IMU on every link, rotated into the link frame.
pub fn link_gyros(model: &ChainModel, sensor_gyros: &[Vec3], corrections: &MountCalibration) -> Result<Vec<Vec3>> {
    if sensor_gyros.len() != model.link_count() {
        return Err(Error::InvalidInput(format!(
            "{} gyro readings for {} links",
            sensor_gyros.len(),
            model.link_count()
        )));
    }
    Ok(sensor_gyros
        .iter()
        .enumerate()
        .map(|(link, g)| {
            let idx = model.mount_index(link, 0).expect("every link has an IMU");
            corrections.orientation(idx) * *g
        })
        .collect())
}

/// Joint velocities by forward substitution through the lower
/// block-triangular velocity-composition system.
pub fn joint_velocities_unconstrained(
    model: &ChainModel,
    q: &DVector<f64>,
    sensor_gyros: &[Vec3],
    corrections: &MountCalibration,
) -> Result<VelocitySolveReport> {
    let w = link_gyros(model, sensor_gyros, corrections)?;
    let n = model.link_count();
    let mut rates: Vec<Vec3> = Vec::with_capacity(n);
    // to_link[k] = R_k^i for the current link i, built incrementally.
    let mut to_link: Vec<so3::Rotation> = Vec::with_capacity(n);
    for (i, wi) in w.iter().enumerate() {
        if i > 0 {
            let step = model.joint_rotation(q, i).transpose();
            for r in to_link.iter_mut() {
                *r = step * *r;
            }
        }
        let carried = rates.iter().zip(&to_link).fold(Vec3::zeros(), |acc, (rate, r)| acc + *r * *rate);
        rates.push(wi - carried);
        to_link.push(so3::Rotation::identity());
    }
    let velocities = DVector::from_iterator(3 * n, rates.iter().flat_map(|v| v.iter().copied()));
    Ok(VelocitySolveReport { velocities, residual: None, condition: None, method: VelocityMethod::Unconstrained })
}

/// Dense 3N x 3N velocity-composition matrix with `R_k^i` blocks below the
/// identity diagonal.
pub fn velocity_composition_matrix(model: &ChainModel, q: &DVector<f64>) -> DMatrix<f64> {
    let n = model.link_count();
    let mut t = DMatrix::zeros(3 * n, 3 * n);
    for i in 0..n {
        for k in 0..=i {
            let r = model.relative_rotation(q, k, i);
            t.fixed_view_mut::<3, 3>(3 * i, 3 * k).copy_from(r.matrix());
        }
    }
    t
}

fn stack(w: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(3 * w.len(), w.iter().flat_map(|v| v.iter().copied()))
}

/// Generalized velocities by least squares on the stacked angular Jacobians.
pub fn joint_velocities_constrained(
    model: &ChainModel,
    q: &DVector<f64>,
    sensor_gyros: &[Vec3],
    corrections: &MountCalibration,
) -> Result<VelocitySolveReport> {
    joint_velocities_constrained_with(model, q, sensor_gyros, corrections, so3::DEFAULT_MAX_CONDITION)
}

pub fn joint_velocities_constrained_with(
    model: &ChainModel,
    q: &DVector<f64>,
    sensor_gyros: &[Vec3],
    corrections: &MountCalibration,
    max_condition: f64,
) -> Result<VelocitySolveReport> {
    let w = stack(&link_gyros(model, sensor_gyros, corrections)?);
    let tj = model.stacked_jacobian(q);
    let solver = SvdSolver::new(&tj, max_condition)?;
    if solver.ill_conditioned() {
        return Err(Error::IllConditioned { condition: solver.condition(), rank: solver.rank() });
    }
    let velocities = solver.solve(&w);
    let residual = (&tj * &velocities - &w).norm();
    Ok(VelocitySolveReport {
        velocities,
        residual: Some(residual),
        condition: Some(solver.condition()),
        method: VelocityMethod::Constrained,
    })
}

/// Maps per-joint relative angular velocities (the unconstrained solution)
/// onto each joint's own coordinates by per-joint least squares.
pub fn project_to_coordinates(model: &ChainModel, q: &DVector<f64>, unconstrained: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(model.velocity_dim());
    if model.floating_base() {
        out.fixed_rows_mut::<3>(0).copy_from(&unconstrained.fixed_rows::<3>(0));
    }
    for link in 1..model.link_count() {
        let s = model.joint(link).rate_matrix(&q.as_slice()[model.joint_range(link)]);
        let rel = unconstrained.fixed_rows::<3>(3 * link).into_owned();
        let coords = so3::checked_svd(&s).solve(&rel, 1e-14).expect("svd solve");
        out.rows_mut(model.velocity_range(link).start, coords.len()).copy_from(&coords);
    }
    out
}

/// Angular velocity and acceleration of a link, in that link's frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinkRates {
    pub angular_velocity: Vec3,
    pub angular_acceleration: Vec3,
}

impl LinkRates {
    /// Rates of the child link given the parent rates, the child-from-parent
    /// rotation and the joint's relative velocity and acceleration.
    pub fn propagate(&self, child_from_parent: &so3::Rotation, rel_velocity: &Vec3, rel_acceleration: &Vec3) -> LinkRates {
        let carried = *child_from_parent * self.angular_velocity;
        LinkRates {
            angular_velocity: carried + rel_velocity,
            angular_acceleration: *child_from_parent * self.angular_acceleration + rel_acceleration + carried.cross(rel_velocity),
        }
    }
}

/// Sensor-frame accelerometer readings feeding one joint solve.
#[derive(Clone, Copy, Debug)]
pub struct AccelInputs {
    /// Relative angular velocity of the joint in the child frame (from the gyros).
    pub joint_velocity: Vec3,
    /// Primary IMU on the parent link.
    pub parent: Vec3,
    /// Both IMUs on the child link.
    pub child: [Vec3; 2],
    /// Parent-link rates; `None` assumes a non-rotating parent.
    pub parent_rates: Option<LinkRates>,
}

#[derive(Clone, Debug)]
pub struct AccelSolveReport {
    /// Relative angular acceleration of the joint in the child frame.
    pub acceleration: Vec3,
    pub condition: f64,
    pub full_rank: bool,
}

/// Relative angular acceleration of the joint of `link` from one parent
/// accelerometer and two child accelerometers.
///
/// Solves `[p^x; p~^x] a = [R a_p - a_c + k; R a_p - a~_c + k~]` where `p`,
/// `p~` are the child IMU positions relative to the joint center and `k`
/// collects the centripetal and parent-rotation terms. Gravity cancels in
/// `R a_p - a_c`.
pub fn joint_acceleration(
    model: &ChainModel,
    q: &DVector<f64>,
    link: usize,
    inputs: &AccelInputs,
    corrections: &MountCalibration,
) -> Result<AccelSolveReport> {
    if link == 0 || link >= model.link_count() {
        return Err(Error::InvalidInput(format!("no joint above link {link}")));
    }
    let parent_idx = model.mount_index(link - 1, 0).expect("every link has an IMU");
    let child_idx = [model.mount_index(link, 0), model.mount_index(link, 1)];
    let [Some(c0), Some(c1)] = child_idx else {
        return Err(Error::InvalidInput(format!("link {link} needs two IMUs for acceleration recovery")));
    };
    let child_from_parent = model.relative_rotation(q, link - 1, link);
    let joint = model.joint(link);

    let a_parent = child_from_parent * (corrections.orientation(parent_idx) * inputs.parent);
    let r_jp = child_from_parent * (corrections.position(parent_idx) - joint.origin);
    let rates = inputs.parent_rates.unwrap_or_default();
    let w_p = child_from_parent * rates.angular_velocity;
    let dw_p = child_from_parent * rates.angular_acceleration;
    let theta_dot = inputs.joint_velocity;
    let w_c = w_p + theta_dot;
    let spin = skew(&w_c);
    let spin_parent = skew(&w_p);

    let mut lhs = DMatrix::zeros(6, 3);
    let mut rhs = DVector::zeros(6);
    for (row, (idx, reading)) in [(c0, inputs.child[0]), (c1, inputs.child[1])].into_iter().enumerate() {
        let p = corrections.position(idx);
        let a_child = corrections.orientation(idx) * reading;
        let r_pq = p - r_jp;
        let k = spin * spin * p + w_p.cross(&theta_dot).cross(&p) + dw_p.cross(&r_pq) - spin_parent * spin_parent * r_jp;
        lhs.fixed_view_mut::<3, 3>(3 * row, 0).copy_from(&skew(&p));
        rhs.fixed_rows_mut::<3>(3 * row).copy_from(&(a_parent - a_child + k));
    }
    let solver = SvdSolver::new(&lhs, MAX_ACCEL_CONDITION)?;
    if solver.ill_conditioned() {
        return Err(Error::NearSingular { condition: solver.condition() });
    }
    let x = solver.solve(&rhs);
    Ok(AccelSolveReport { acceleration: Vec3::new(x[0], x[1], x[2]), condition: solver.condition(), full_rank: true })
}

/// Accelerometer-derived accelerations of every joint whose child link
/// carries two IMUs.
#[derive(Clone, Debug)]
pub struct ChainAccelerations {
    /// Relative angular acceleration per link (index 0 unused).
    pub relative: Vec<Option<Vec3>>,
    /// Joint coordinate accelerations; zero for joints without a solve.
    pub coordinates: DVector<f64>,
}

/// Walks the chain from the base, solving each joint with the parent rates
/// propagated from `base_rates` (zero on a fixed base). `velocities` are the
/// generalized velocities `[omega_base; qdot]`.
#[allow(clippy::needless_range_loop)] // `link` indexes the model, the inputs and the outputs.
pub fn chain_accelerations(
    model: &ChainModel,
    q: &DVector<f64>,
    velocities: &DVector<f64>,
    base_rates: Option<LinkRates>,
    sensor_accels: &[Vec3],
    corrections: &MountCalibration,
) -> Result<ChainAccelerations> {
    if sensor_accels.len() != model.mounts().len() || velocities.len() != model.velocity_dim() || q.len() != model.joint_dof() {
        return Err(Error::InvalidInput("acceleration inputs do not match the model".into()));
    }
    let n = model.link_count();
    let mut relative = vec![None; n];
    let mut coordinates = DVector::zeros(model.joint_dof());
    let mut rates = base_rates.unwrap_or_default();
    for link in 1..n {
        let joint = model.joint(link);
        let qj = &q.as_slice()[model.joint_range(link)];
        let qd = &velocities.as_slice()[model.velocity_range(link)];
        let rel_velocity = joint.rate_matrix(qj) * DVector::from_column_slice(qd);
        let rel_velocity = Vec3::new(rel_velocity[0], rel_velocity[1], rel_velocity[2]);
        let rel_accel = match (model.mount_index(link, 0), model.mount_index(link, 1)) {
            (Some(c0), Some(c1)) => {
                let parent = model.mount_index(link - 1, 0).expect("every link has an IMU");
                let inputs = AccelInputs {
                    joint_velocity: rel_velocity,
                    parent: sensor_accels[parent],
                    child: [sensor_accels[c0], sensor_accels[c1]],
                    parent_rates: Some(rates),
                };
                let report = joint_acceleration(model, q, link, &inputs, corrections)?;
                let coords = model.coordinate_acceleration(q, qd, &report.acceleration, link);
                coordinates.rows_mut(model.joint_range(link).start, coords.len()).copy_from(&coords);
                relative[link] = Some(report.acceleration);
                report.acceleration
            }
            _ => Vec3::zeros(),
        };
        rates = rates.propagate(&model.joint_rotation(q, link).transpose(), &rel_velocity, &rel_accel);
    }
    Ok(ChainAccelerations { relative, coordinates })
}
