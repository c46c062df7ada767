//! Serial kinematic chain: a (possibly floating) base link followed by
//! links connected through 1-3 DoF rotary joints, each modeled as an
//! ordered sequence of single-axis rotations.
//!
//! Indexing: link 0 is the base. The joint of link `i >= 1` connects link
//! `i - 1` (parent) to link `i` (child). Generalized velocities are stacked
//! as `[omega_base (3, floating base only); qdot_joints]`, where
//! `omega_base` is the base angular velocity in the base frame.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::so3::{Rotation, Vec3};

/// Rotary joint between a parent and a child link.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: String,
    /// Child-frame origin (the joint center) in the parent frame, meters.
    pub origin: Vec3,
    /// Parent-from-child rotation at zero joint position.
    pub rest: Rotation,
    /// Unit rotation axes. Axis `k` is applied after axes `0..k`; at zero
    /// position all axes are expressed in the child frame.
    axes: Vec<Vec3>,
}

/// Joint-relative motion of a child with respect to its parent.
#[derive(Clone, Copy, Debug)]
pub struct RelativeMotion {
    /// Parent-from-child rotation.
    pub rotation: Rotation,
    /// Relative angular velocity in the child frame.
    pub angular_velocity: Vec3,
    /// Time derivative of the child-frame components of `angular_velocity`.
    pub angular_acceleration: Vec3,
}

impl JointSpec {
    pub fn new(name: impl Into<String>, origin: Vec3, rest: Rotation, axes: Vec<Vec3>) -> Result<Self> {
        let name = name.into();
        if axes.is_empty() || axes.len() > 3 {
            return Err(Error::InvalidModel(format!("joint {name}: {} axes, expected 1..=3", axes.len())));
        }
        let mut unit = Vec::with_capacity(axes.len());
        for a in axes {
            let n = a.norm();
            if !(n > 1e-9) || !n.is_finite() {
                return Err(Error::InvalidModel(format!("joint {name}: degenerate axis {a:?}")));
            }
            unit.push(a / n);
        }
        Ok(Self { name, origin, rest, axes: unit })
    }

    pub fn dof(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec3] {
        &self.axes
    }

    pub fn rotation(&self, q: &[f64]) -> Rotation {
        self.axes
            .iter()
            .zip(q)
            .fold(self.rest, |r, (a, &angle)| r * Rotation::exp(&(a * angle)))
    }

    /// 3 x dof matrix mapping coordinate rates to the child-frame relative
    /// angular velocity.
    pub fn rate_matrix(&self, q: &[f64]) -> DMatrix<f64> {
        let m = self.dof();
        let mut s = DMatrix::zeros(3, m);
        let mut trailing = Rotation::identity();
        for k in (0..m).rev() {
            s.fixed_view_mut::<3, 1>(0, k).copy_from(&(trailing.transpose() * self.axes[k]));
            trailing = Rotation::exp(&(self.axes[k] * q[k])) * trailing;
        }
        s
    }

    pub fn relative_motion(&self, q: &[f64], qd: &[f64], qdd: &[f64]) -> RelativeMotion {
        let mut rotation = self.rest;
        let mut w = Vec3::zeros();
        let mut dw = Vec3::zeros();
        for (k, a) in self.axes.iter().enumerate() {
            let step = Rotation::exp(&(a * q[k]));
            let carried = step.transpose() * w;
            let spin = a * qd[k];
            dw = step.transpose() * dw + a * qdd[k] + carried.cross(&spin);
            w = carried + spin;
            rotation = rotation * step;
        }
        RelativeMotion { rotation, angular_velocity: w, angular_acceleration: dw }
    }
}

/// An IMU rigidly attached to a link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuMount {
    pub link: usize,
    /// Sensor position in the link frame, meters.
    pub position: Vec3,
    /// Link-from-sensor rotation.
    pub orientation: Rotation,
}

/// Joint positions, velocities and accelerations of the whole chain.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    /// World-from-base rotation (the floating-base coordinates).
    pub base_orientation: Rotation,
    /// Joint coordinates (base excluded), rad.
    pub positions: DVector<f64>,
    /// Generalized velocities `[omega_base; qdot]`, rad/s.
    pub velocities: DVector<f64>,
    /// Generalized accelerations `[alpha_base; qddot]`, rad/s^2.
    pub accelerations: DVector<f64>,
}

impl JointState {
    pub fn zeros(model: &ChainModel) -> Self {
        Self {
            base_orientation: Rotation::identity(),
            positions: DVector::zeros(model.joint_dof()),
            velocities: DVector::zeros(model.velocity_dim()),
            accelerations: DVector::zeros(model.velocity_dim()),
        }
    }

    /// Positions stacked as `[log(base_orientation); q]` (floating base) or `q`.
    pub fn stacked_positions(&self, model: &ChainModel) -> DVector<f64> {
        let b = model.base_dof();
        let mut out = DVector::zeros(b + self.positions.len());
        if b == 3 {
            out.fixed_rows_mut::<3>(0).copy_from(&self.base_orientation.log());
        }
        out.rows_mut(b, self.positions.len()).copy_from(&self.positions);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(self.velocities.iter()).chain(self.accelerations.iter()).all(|v| v.is_finite())
    }
}

/// Translational motion of the base origin in world coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BaseTranslation {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

/// World-frame motion of one link.
#[derive(Clone, Copy, Debug)]
pub struct LinkMotion {
    /// World-from-link rotation.
    pub rotation: Rotation,
    /// Angular velocity in the link frame.
    pub angular_velocity: Vec3,
    /// Angular acceleration in the link frame.
    pub angular_acceleration: Vec3,
    /// World position, velocity and acceleration of the link origin.
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl LinkMotion {
    /// World position and acceleration of a point fixed in the link frame.
    pub fn point(&self, local: &Vec3) -> (Vec3, Vec3) {
        let r = self.rotation * *local;
        let w = self.rotation * self.angular_velocity;
        let dw = self.rotation * self.angular_acceleration;
        (self.position + r, self.acceleration + dw.cross(&r) + w.cross(&w.cross(&r)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainModel {
    joints: Vec<JointSpec>,
    mounts: Vec<ImuMount>,
    floating_base: bool,
    joint_offsets: Vec<usize>,
}

impl ChainModel {
    /// `joints[k]` connects link `k` to link `k + 1`. Every link needs at
    /// least one IMU and at most two.
    pub fn new(joints: Vec<JointSpec>, mounts: Vec<ImuMount>, floating_base: bool) -> Result<Self> {
        let links = joints.len() + 1;
        let mut per_link = vec![0usize; links];
        for m in &mounts {
            if m.link >= links {
                return Err(Error::InvalidModel(format!("IMU on link {} but chain has {links} links", m.link)));
            }
            per_link[m.link] += 1;
        }
        if let Some(l) = per_link.iter().position(|&c| c == 0) {
            return Err(Error::InvalidModel(format!("link {l} carries no IMU")));
        }
        if let Some(l) = per_link.iter().position(|&c| c > 2) {
            return Err(Error::InvalidModel(format!("link {l} carries more than two IMUs")));
        }
        let mut joint_offsets = Vec::with_capacity(joints.len() + 1);
        let mut acc = 0;
        for j in &joints {
            joint_offsets.push(acc);
            acc += j.dof();
        }
        joint_offsets.push(acc);
        // Keep mounts grouped by link, preserving the order given per link.
        let mut sorted = mounts;
        sorted.sort_by_key(|m| m.link);
        Ok(Self { joints, mounts: sorted, floating_base, joint_offsets })
    }

    pub fn link_count(&self) -> usize {
        self.joints.len() + 1
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    /// Joint of link `link` (`link >= 1`).
    pub fn joint(&self, link: usize) -> &JointSpec {
        &self.joints[link - 1]
    }

    pub fn mounts(&self) -> &[ImuMount] {
        &self.mounts
    }

    pub fn floating_base(&self) -> bool {
        self.floating_base
    }

    pub fn base_dof(&self) -> usize {
        if self.floating_base {
            3
        } else {
            0
        }
    }

    /// Number of joint coordinates (base excluded).
    pub fn joint_dof(&self) -> usize {
        *self.joint_offsets.last().unwrap_or(&0)
    }

    pub fn velocity_dim(&self) -> usize {
        self.base_dof() + self.joint_dof()
    }

    /// Range of link `link`'s joint inside the joint-coordinate vector.
    pub fn joint_range(&self, link: usize) -> std::ops::Range<usize> {
        self.joint_offsets[link - 1]..self.joint_offsets[link]
    }

    /// Range of link `link`'s joint inside the generalized velocity vector.
    pub fn velocity_range(&self, link: usize) -> std::ops::Range<usize> {
        let r = self.joint_range(link);
        r.start + self.base_dof()..r.end + self.base_dof()
    }

    /// Global IMU index of the `slot`-th mount (0 or 1) on `link`.
    pub fn mount_index(&self, link: usize, slot: usize) -> Option<usize> {
        self.mounts.iter().enumerate().filter(|(_, m)| m.link == link).nth(slot).map(|(i, _)| i)
    }

    /// Slot (0 or 1) of global IMU `index` on its link.
    pub fn mount_slot(&self, index: usize) -> usize {
        let link = self.mounts[index].link;
        self.mounts[..index].iter().filter(|m| m.link == link).count()
    }

    pub fn primary_mount(&self, link: usize) -> &ImuMount {
        &self.mounts[self.mount_index(link, 0).expect("every link has an IMU")]
    }

    fn joint_q<'a>(&self, q: &'a DVector<f64>, link: usize) -> &'a [f64] {
        &q.as_slice()[self.joint_range(link)]
    }

    /// Parent-from-child rotation of the joint of `link`.
    pub fn joint_rotation(&self, q: &DVector<f64>, link: usize) -> Rotation {
        self.joint(link).rotation(self.joint_q(q, link))
    }

    /// `R_i^j`: maps link-`i` coordinates into link-`j` coordinates.
    pub fn relative_rotation(&self, q: &DVector<f64>, i: usize, j: usize) -> Rotation {
        if i > j {
            return self.relative_rotation(q, j, i).transpose();
        }
        // Product of parent-from-child rotations maps j coordinates into i.
        let i_from_j = (i + 1..=j).fold(Rotation::identity(), |acc, l| acc * self.joint_rotation(q, l));
        i_from_j.transpose()
    }

    /// Base-from-link rotations and link origins in the base frame.
    pub fn base_frame_poses(&self, q: &DVector<f64>) -> Vec<(Rotation, Vec3)> {
        let mut out = Vec::with_capacity(self.link_count());
        out.push((Rotation::identity(), Vec3::zeros()));
        for link in 1..self.link_count() {
            let (r, p) = out[link - 1];
            let origin = p + r * self.joint(link).origin;
            out.push((r * self.joint_rotation(q, link), origin));
        }
        out
    }

    /// `J_i^i`: 3 x velocity_dim matrix mapping generalized velocities to the
    /// link-`i` angular velocity in the link-`i` frame.
    pub fn angular_jacobian_local(&self, q: &DVector<f64>, link: usize) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(3, self.velocity_dim());
        // to_link maps link-k coordinates into link `link` coordinates, walking k down to 0.
        let mut to_link = Rotation::identity();
        for k in (1..=link).rev() {
            let rates = self.joint(k).rate_matrix(self.joint_q(q, k));
            let cols = to_link.matrix() * rates;
            let start = self.velocity_range(k).start;
            jac.view_mut((0, start), (3, cols.ncols())).copy_from(&cols);
            to_link = to_link * self.joint_rotation(q, k).transpose();
        }
        if self.floating_base {
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(to_link.matrix());
        }
        jac
    }

    /// Stacked `T_J` (3N x velocity_dim).
    pub fn stacked_jacobian(&self, q: &DVector<f64>) -> DMatrix<f64> {
        let n = self.link_count();
        let mut t = DMatrix::zeros(3 * n, self.velocity_dim());
        for link in 0..n {
            t.view_mut((3 * link, 0), (3, self.velocity_dim())).copy_from(&self.angular_jacobian_local(q, link));
        }
        t
    }

    /// Relative motion of joint `link` given generalized velocities and accelerations.
    pub fn joint_relative_motion(&self, state: &JointState, link: usize) -> RelativeMotion {
        let r = self.joint_range(link);
        let v = self.velocity_range(link);
        self.joint(link).relative_motion(
            &state.positions.as_slice()[r],
            &state.velocities.as_slice()[v.clone()],
            &state.accelerations.as_slice()[v],
        )
    }

    /// World-frame motion of every link.
    pub fn link_motions(&self, state: &JointState, base: &BaseTranslation) -> Vec<LinkMotion> {
        let (w0, dw0) = if self.floating_base {
            (state.velocities.fixed_rows::<3>(0).into_owned(), state.accelerations.fixed_rows::<3>(0).into_owned())
        } else {
            (Vec3::zeros(), Vec3::zeros())
        };
        let mut out = Vec::with_capacity(self.link_count());
        out.push(LinkMotion {
            rotation: state.base_orientation,
            angular_velocity: w0,
            angular_acceleration: dw0,
            position: base.position,
            velocity: base.velocity,
            acceleration: base.acceleration,
        });
        for link in 1..self.link_count() {
            let parent = out[link - 1];
            let rel = self.joint_relative_motion(state, link);
            let r = parent.rotation * self.joint(link).origin;
            let w_world = parent.rotation * parent.angular_velocity;
            let dw_world = parent.rotation * parent.angular_acceleration;
            let carried = rel.rotation.transpose() * parent.angular_velocity;
            out.push(LinkMotion {
                rotation: parent.rotation * rel.rotation,
                angular_velocity: carried + rel.angular_velocity,
                angular_acceleration: rel.rotation.transpose() * parent.angular_acceleration
                    + rel.angular_acceleration
                    + carried.cross(&rel.angular_velocity),
                position: parent.position + r,
                velocity: parent.velocity + w_world.cross(&r),
                acceleration: parent.acceleration + dw_world.cross(&r) + w_world.cross(&w_world.cross(&r)),
            });
        }
        out
    }

    /// Converts a child-frame relative angular acceleration of joint `link`
    /// into coordinate accelerations by least squares on the rate matrix,
    /// removing the velocity-product term first.
    pub fn coordinate_acceleration(&self, q: &DVector<f64>, qd_joint: &[f64], relative: &Vec3, link: usize) -> DVector<f64> {
        let joint = self.joint(link);
        let qj = self.joint_q(q, link);
        let zeros = vec![0.0; joint.dof()];
        let bias = joint.relative_motion(qj, qd_joint, &zeros).angular_acceleration;
        let s = joint.rate_matrix(qj);
        let rhs = relative - bias;
        let sol = crate::so3::checked_svd(&s).solve(&rhs, 1e-12).expect("svd solve");
        DVector::from_column_slice(sol.as_slice())
    }
}
