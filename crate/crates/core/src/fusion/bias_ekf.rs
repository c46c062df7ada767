//! Extended Kalman filter on joint positions and per-link gyro biases.
//!
//! Process: `qdot = T_J(q)^+ (w - b)`, `bdot` Brownian. Measurements: joint
//! positions and, on a floating base, the base orientation. The base
//! orientation is kept as a rotation with a body-frame rotation-vector error
//! state; everything else is additive.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};

use crate::chain::ChainModel;
use crate::error::{Error, Result};
use crate::so3::{right_jacobian, Rotation, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct BiasEkfConfig {
    /// Per-sample gyro noise std (rad/s).
    pub gyro_noise: f64,
    /// Bias random walk density (rad/s/sqrt(s)).
    pub bias_walk: f64,
    /// Joint position sensor std (rad).
    pub joint_noise: f64,
    /// Base orientation sensor std (rad).
    pub base_orientation_noise: f64,
    pub initial_variance: f64,
    /// Any variance above this is reported as divergence.
    pub variance_ceiling: f64,
}

impl Default for BiasEkfConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 5e-3,
            bias_walk: 1e-4,
            joint_noise: 1e-3,
            base_orientation_noise: 1e-3,
            initial_variance: 1e-2,
            variance_ceiling: 1e6,
        }
    }
}

/// Filter mean: base orientation (floating base only), joint coordinates,
/// and one link-frame bias per link stacked.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasEkfMean {
    pub base_orientation: Rotation,
    pub positions: DVector<f64>,
    pub biases: DVector<f64>,
}

impl BiasEkfMean {
    /// Applies an error-state increment `[d_base; d_q; d_b]`.
    pub fn boxplus(&self, model: &ChainModel, dx: &DVector<f64>) -> Self {
        let nb = model.base_dof();
        let nq = model.joint_dof();
        let base_orientation = if nb == 3 {
            self.base_orientation * Rotation::exp(&Vec3::new(dx[0], dx[1], dx[2]))
        } else {
            self.base_orientation
        };
        Self {
            base_orientation,
            positions: &self.positions + dx.rows(nb, nq),
            biases: &self.biases + dx.rows(nb + nq, self.biases.len()),
        }
    }

    /// Error state taking `other` to `self`.
    pub fn boxminus(&self, model: &ChainModel, other: &Self) -> DVector<f64> {
        let nb = model.base_dof();
        let nq = model.joint_dof();
        let mut dx = DVector::zeros(nb + nq + self.biases.len());
        if nb == 3 {
            dx.fixed_rows_mut::<3>(0).copy_from(&(other.base_orientation.transpose() * self.base_orientation).log());
        }
        dx.rows_mut(nb, nq).copy_from(&(&self.positions - &other.positions));
        dx.rows_mut(nb + nq, self.biases.len()).copy_from(&(&self.biases - &other.biases));
        dx
    }

    pub fn bias(&self, link: usize) -> Vec3 {
        Vec3::new(self.biases[3 * link], self.biases[3 * link + 1], self.biases[3 * link + 2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Innovation {
    /// Normalized innovation squared.
    pub nis: f64,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasEkfState {
    pub mean: BiasEkfMean,
    pub covariance: DMatrix<f64>,
    pub time: f64,
    /// Gyro sample of the previous step, used by the trapezoidal predict.
    pub previous_gyros: Option<DVector<f64>>,
    pub last_innovation: Option<Innovation>,
}

impl BiasEkfState {
    pub fn new(model: &ChainModel, mean: BiasEkfMean, config: &BiasEkfConfig) -> Self {
        let n = model.velocity_dim() + 3 * model.link_count();
        Self {
            mean,
            covariance: DMatrix::from_diagonal_element(n, n, config.initial_variance),
            time: 0.0,
            previous_gyros: None,
            last_innovation: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }
}

/// Measurements of one step. Gyros are link-frame readings of each link's
/// primary IMU.
#[derive(Clone, Debug)]
pub struct EkfMeasurement<'a> {
    pub gyros: &'a [Vec3],
    pub joint_positions: &'a DVector<f64>,
    pub base_orientation: Option<Rotation>,
}

/// Least-squares pseudo-inverse of the stacked Jacobian through the normal
/// equations.
fn jacobian_pinv(model: &ChainModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    let t = model.stacked_jacobian(q);
    let normal = t.transpose() * &t;
    let chol = normal.cholesky().ok_or(Error::IllConditioned { condition: f64::INFINITY, rank: 0 })?;
    Ok(chol.solve(&t.transpose()))
}

fn rates(model: &ChainModel, q: &DVector<f64>, w: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(jacobian_pinv(model, q)? * (w - b))
}

/// `d rates / d x` over the error state; base columns are zero.
fn rates_jacobian(model: &ChainModel, q: &DVector<f64>, w: &DVector<f64>, b: &DVector<f64>, pinv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let nb = model.base_dof();
    let nq = model.joint_dof();
    let nv = nb + nq;
    let n = nv + b.len();
    let mut g = DMatrix::zeros(nv, n);
    let h = 1e-6;
    for j in 0..nq {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        let col = (rates(model, &qp, w, b)? - rates(model, &qm, w, b)?) / (2.0 * h);
        g.column_mut(nb + j).copy_from(&col);
    }
    g.view_mut((0, nv), (nv, b.len())).copy_from(&(-pinv));
    Ok(g)
}

/// Trapezoidal (Heun) prediction of the mean with the gyro samples at the
/// start and end of the interval, and the exact Jacobian of that map over
/// the error state.
pub fn propagate_mean(
    model: &ChainModel,
    mean: &BiasEkfMean,
    w_start: &DVector<f64>,
    w_end: &DVector<f64>,
    dt: f64,
) -> Result<(BiasEkfMean, DMatrix<f64>, [DMatrix<f64>; 2])> {
    let nb = model.base_dof();
    let nq = model.joint_dof();
    let nv = nb + nq;
    let b = &mean.biases;
    let n = nv + b.len();
    let q = &mean.positions;

    let p1 = jacobian_pinv(model, q)?;
    let k1 = &p1 * (w_start - b);
    let q_mid = q + k1.rows(nb, nq) * dt;
    let p2 = jacobian_pinv(model, &q_mid)?;
    let k2 = &p2 * (w_end - b);
    let k = (&k1 + &k2) * 0.5;

    let base_step = if nb == 3 { Vec3::new(k[0], k[1], k[2]) * dt } else { Vec3::zeros() };
    let next = BiasEkfMean {
        base_orientation: mean.base_orientation * Rotation::exp(&base_step),
        positions: q + k.rows(nb, nq) * dt,
        biases: b.clone(),
    };

    let g1 = rates_jacobian(model, q, w_start, b, &p1)?;
    let g2 = rates_jacobian(model, &q_mid, w_end, b, &p2)?;
    let mut mid = DMatrix::identity(n, n);
    mid.view_mut((nb, 0), (nq, n)).add_assign(&(g1.rows(nb, nq) * dt));
    let m = (&g1 + &g2 * &mid) * 0.5;

    let mut f = DMatrix::identity(n, n);
    f.view_mut((nb, 0), (nq, n)).add_assign(&(m.rows(nb, nq) * dt));
    if nb == 3 {
        let jr = right_jacobian(&base_step);
        let back = Rotation::exp(&base_step).transpose();
        let rows = jr * m.rows(0, 3) * dt;
        f.view_mut((0, 0), (3, n)).copy_from(&rows);
        f.view_mut((0, 0), (3, 3)).add_assign(back.matrix());
    }
    Ok((next, f, [p1, p2]))
}

/// Generalized velocities `T_J(q)^+ (w - b)` implied by the filter mean.
pub fn estimated_rates(model: &ChainModel, mean: &BiasEkfMean, gyros: &[Vec3]) -> Result<DVector<f64>> {
    rates(model, &mean.positions, &stack(gyros), &mean.biases)
}

fn stack(gyros: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(3 * gyros.len(), gyros.iter().flat_map(|v| v.iter().copied()))
}

/// Inverse of a symmetric innovation covariance; pseudo-inverse when singular.
pub(crate) fn symmetric_inverse(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = s.clone().cholesky() {
        return chol.inverse();
    }
    let svd = crate::so3::checked_svd(s);
    let tol = s.nrows() as f64 * f64::EPSILON * svd.singular_values.max();
    svd.pseudo_inverse(tol).unwrap_or_else(|_| DMatrix::zeros(s.nrows(), s.ncols()))
}

/// Checks symmetry, the variance ceiling and finiteness.
pub(crate) fn check_covariance(p: &DMatrix<f64>, ceiling: f64) -> Result<()> {
    for i in 0..p.nrows() {
        let v = p[(i, i)];
        if !(v <= ceiling) {
            return Err(Error::CovarianceDivergence { index: i, variance: v });
        }
    }
    Ok(())
}

/// Joseph-form update, symmetrized.
pub(crate) fn joseph_update(p: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>, innovation: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>, f64) {
    let s = h * p * h.transpose() + r;
    let s_inv = symmetric_inverse(&s);
    let k = p * h.transpose() * &s_inv;
    let dx = &k * innovation;
    let i_kh = DMatrix::identity(p.nrows(), p.nrows()) - &k * h;
    let updated = &i_kh * p * i_kh.transpose() + &k * r * k.transpose();
    let nis = (innovation.transpose() * &s_inv * innovation)[(0, 0)];
    (dx, (&updated + updated.transpose()) * 0.5, nis)
}

/// One predict/update cycle. The first call (no previous gyro sample) only
/// performs the measurement update.
pub fn bias_ekf_step(
    state: &BiasEkfState,
    meas: &EkfMeasurement<'_>,
    model: &ChainModel,
    config: &BiasEkfConfig,
    dt: f64,
) -> Result<BiasEkfState> {
    let nb = model.base_dof();
    let nq = model.joint_dof();
    let nv = nb + nq;
    let n = state.dim();
    if meas.gyros.len() != model.link_count() || meas.joint_positions.len() != nq {
        return Err(Error::InvalidInput("measurement does not match the model".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    let w = stack(meas.gyros);

    let (mut mean, mut p, time) = match &state.previous_gyros {
        None => (state.mean.clone(), state.covariance.clone(), state.time),
        Some(w_prev) => {
            let (next, f, [p1, p2]) = propagate_mean(model, &state.mean, w_prev, &w, dt)?;
            let mut q = DMatrix::zeros(n, n);
            let sigma2 = config.gyro_noise * config.gyro_noise;
            let mut theta_q = (&p1 * p1.transpose() + &p2 * p2.transpose()) * (0.25 * dt * dt * sigma2);
            if nb == 3 {
                let mut l = DMatrix::identity(nv, nv);
                let jr = right_jacobian(&(state.mean.base_orientation.transpose() * next.base_orientation).log());
                l.view_mut((0, 0), (3, 3)).copy_from(&jr);
                theta_q = &l * theta_q * l.transpose();
            }
            q.view_mut((0, 0), (nv, nv)).copy_from(&theta_q);
            for i in nv..n {
                q[(i, i)] = config.bias_walk * config.bias_walk * dt;
            }
            let predicted = &f * &state.covariance * f.transpose() + q;
            (next, (&predicted + predicted.transpose()) * 0.5, state.time + dt)
        }
    };

    let use_base = nb == 3 && meas.base_orientation.is_some();
    let rows = if use_base { nv } else { nq };
    let offset = if use_base { 0 } else { nb };
    let mut h = DMatrix::zeros(rows, n);
    let mut r = DMatrix::zeros(rows, rows);
    let mut innovation = DVector::zeros(rows);
    for i in 0..rows {
        h[(i, offset + i)] = 1.0;
    }
    if use_base {
        let measured = meas.base_orientation.expect("checked above");
        innovation.fixed_rows_mut::<3>(0).copy_from(&(mean.base_orientation.transpose() * measured).log());
        for i in 0..3 {
            r[(i, i)] = config.base_orientation_noise * config.base_orientation_noise;
        }
    }
    let joint_offset = rows - nq;
    innovation.rows_mut(joint_offset, nq).copy_from(&(meas.joint_positions - &mean.positions));
    for i in joint_offset..rows {
        r[(i, i)] = config.joint_noise * config.joint_noise;
    }
    let (dx, p_new, nis) = joseph_update(&p, &h, &r, &innovation);
    mean = mean.boxplus(model, &dx);
    p = p_new;
    check_covariance(&p, config.variance_ceiling)?;

    Ok(BiasEkfState {
        mean,
        covariance: p,
        time,
        previous_gyros: Some(w),
        last_innovation: Some(Innovation { nis, dim: rows }),
    })
}
