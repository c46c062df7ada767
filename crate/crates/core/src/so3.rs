//! Small fixed-size algebra: rotations, the skew operator, the Kabsch
//! rotation fit and an SVD least-squares solver shared by the estimators
//! and the calibration routines.

use std::ops::Mul;

use nalgebra::{DMatrix, DVector, Dyn, Matrix3, Vector3, SVD};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Default condition-number ceiling above which a least-squares solve is
/// flagged as ill-conditioned.
pub const DEFAULT_MAX_CONDITION: f64 = 1e8;

/// A proper rotation stored as a 3x3 orthonormal matrix.
///
/// `Rotation` maps coordinates expressed in a source frame into a target
/// frame: `v_target = R * v_source`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps a matrix the caller guarantees to be a proper rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    /// Nearest proper rotation to `m` in the Frobenius sense (polar factor
    /// with determinant correction).
    pub fn orthonormalize(m: &Mat3) -> Self {
        let (u, _, v_t) = svd3(m);
        let d = (u * v_t).determinant().signum();
        let correction = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
        Self(u * correction * v_t)
    }

    /// Rotation of `angle` radians about the unit vector `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Exponential map from a rotation vector.
    pub fn exp(rotvec: &Vec3) -> Self {
        let angle = rotvec.norm();
        let k = skew(rotvec);
        let (a, b) = if angle < 1e-8 {
            (1.0 - angle * angle / 6.0, 0.5 - angle * angle / 24.0)
        } else {
            (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
        };
        Self(Mat3::identity() + k * a + k * k * b)
    }

    /// Logarithm map to a rotation vector with angle in [0, pi].
    pub fn log(&self) -> Vec3 {
        let m = &self.0;
        let cos = (m.trace() - 1.0) * 0.5;
        let vee = Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
        let sin = 0.5 * vee.norm();
        let angle = sin.atan2(cos);
        if angle < 1e-6 {
            return vee * (0.5 + angle * angle / 12.0);
        }
        if std::f64::consts::PI - angle > 1e-6 {
            return vee * (angle / (2.0 * sin));
        }
        // Near pi: the axis is the dominant column of (R + I) / 2.
        let sym = (m + Mat3::identity()) * 0.5;
        let col = (0..3)
            .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
            .unwrap_or(0);
        let mut axis = sym.column(col).into_owned() / sym[(col, col)].max(1e-300).sqrt();
        axis.normalize_mut();
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        axis * angle
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Geodesic distance `|log(self^T other)|` in radians.
    pub fn geodesic(&self, other: &Rotation) -> f64 {
        (self.transpose() * *other).log().norm()
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// Largest deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).abs().max()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Skew-symmetric matrix with `skew(v) * w == v x w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of the exponential map:
/// `exp(v + d) ~ exp(v) * exp(right_jacobian(v) * d)` for small `d`.
pub fn right_jacobian(v: &Vec3) -> Mat3 {
    let angle = v.norm();
    let k = skew(v);
    let (a, b) = if angle < 1e-5 {
        (0.5 - angle * angle / 24.0, 1.0 / 6.0 - angle * angle / 120.0)
    } else {
        ((1.0 - angle.cos()) / (angle * angle), (angle - angle.sin()) / (angle * angle * angle))
    };
    Mat3::identity() - k * a + k * k * b
}

/// Proper rotation `X` minimizing `|A X - B|_F` for row-stacked
/// observations `A`, `B` (M x 3, M >= 3).
///
/// Fails with `RankDeficient` when the rows of `A`, `B` excite fewer than
/// two independent directions.
pub fn kabsch_fit(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Rotation> {
    let (cross, second) = kabsch_cross(a, b)?;
    let tolerance = truncation_tolerance(a.nrows(), 3, cross.0);
    if !(second > tolerance) {
        return Err(Error::RankDeficient { second, tolerance });
    }
    Ok(kabsch_from_cross(&cross.1))
}

/// Returns ((largest singular value, A^T B), second singular value).
pub(crate) fn kabsch_cross(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<((f64, Mat3), f64)> {
    if a.ncols() != 3 || b.ncols() != 3 || a.nrows() != b.nrows() {
        return Err(Error::InvalidInput(format!(
            "kabsch_fit needs two M x 3 matrices, got {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if a.nrows() < 3 {
        return Err(Error::InvalidInput(format!("kabsch_fit needs M >= 3 rows, got {}", a.nrows())));
    }
    let cross: Mat3 = (a.transpose() * b).fixed_view::<3, 3>(0, 0).into_owned();
    let (_, sv, _) = svd3(&cross);
    Ok(((sv[0], cross), sv[1]))
}

pub(crate) fn kabsch_from_cross(cross: &Mat3) -> Rotation {
    let (u, _, v_t) = svd3(cross);
    let d = (u * v_t).determinant().signum();
    let sigma_hat = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    Rotation(u * sigma_hat * v_t)
}

/// Full SVD with a reconstruction check.
///
/// nalgebra's default iteration occasionally stops on an inaccurate
/// factorization when singular values cluster tightly (as they do for
/// stacked rotation blocks). Such results are retried on the transpose and
/// with a looser convergence threshold; the most accurate one is returned.
pub fn checked_svd(a: &DMatrix<f64>) -> SVD<f64, Dyn, Dyn> {
    let (m, n) = a.shape();
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let tolerance = 64.0 * m.max(n) as f64 * f64::EPSILON * scale;
    let transposed = |svd: SVD<f64, Dyn, Dyn>| SVD {
        u: svd.v_t.map(|v| v.transpose()),
        v_t: svd.u.map(|u| u.transpose()),
        singular_values: svd.singular_values,
    };
    let attempts: [&dyn Fn() -> Option<SVD<f64, Dyn, Dyn>>; 4] = [
        &|| Some(a.clone().svd(true, true)),
        &|| Some(transposed(a.transpose().svd(true, true))),
        &|| SVD::try_new(a.clone(), true, true, 1e-14, 0),
        &|| SVD::try_new(a.transpose(), true, true, 1e-14, 0).map(transposed),
    ];
    let mut best: Option<(f64, SVD<f64, Dyn, Dyn>)> = None;
    for attempt in attempts {
        let Some(svd) = attempt() else { continue };
        let error = match svd.clone().recompose() {
            Ok(r) => (r - a).amax(),
            Err(_) => f64::INFINITY,
        };
        if error <= tolerance {
            return svd;
        }
        if best.as_ref().is_none_or(|(e, _)| error < *e) {
            best = Some((error, svd));
        }
    }
    best.expect("the default SVD always produces a result").1
}

/// Checked SVD of a 3x3 matrix as `(U, singular values, V^T)`.
pub fn svd3(m: &Mat3) -> (Mat3, Vec3, Mat3) {
    let svd = checked_svd(&DMatrix::from_column_slice(3, 3, m.as_slice()));
    let u = Mat3::from_column_slice(svd.u.expect("svd u").as_slice());
    let v_t = Mat3::from_column_slice(svd.v_t.expect("svd v_t").as_slice());
    (u, Vec3::from_column_slice(svd.singular_values.as_slice()), v_t)
}

/// Singular values below `max(M, N) * eps * sigma_max` are treated as zero.
pub fn truncation_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

#[derive(Clone, Debug)]
pub struct LstsqSolution {
    pub solution: DVector<f64>,
    /// Ratio of the largest to the smallest retained singular value.
    pub condition: f64,
    pub rank: usize,
    /// Set when a singular value was truncated or the condition exceeds the
    /// configured ceiling.
    pub ill_conditioned: bool,
}

/// SVD of a fixed left-hand matrix, reusable across many right-hand sides.
#[derive(Clone, Debug)]
pub struct SvdSolver {
    u: DMatrix<f64>,
    v_t: DMatrix<f64>,
    singular_values: DVector<f64>,
    rank: usize,
    condition: f64,
    ill_conditioned: bool,
}

impl SvdSolver {
    pub fn new(a: &DMatrix<f64>, max_condition: f64) -> Result<Self> {
        let (m, n) = a.shape();
        if m < n || n == 0 {
            return Err(Error::InvalidInput(format!("least squares needs M >= N >= 1, got {m}x{n}")));
        }
        let svd = checked_svd(a);
        let singular_values = svd.singular_values;
        let sigma_max = singular_values[0];
        let tol = truncation_tolerance(m, n, sigma_max);
        let rank = singular_values.iter().filter(|&&s| s > tol).count();
        let condition = if rank == 0 { f64::INFINITY } else { sigma_max / singular_values[rank - 1] };
        Ok(Self {
            u: svd.u.expect("svd u"),
            v_t: svd.v_t.expect("svd v_t"),
            ill_conditioned: rank < n || condition > max_condition,
            singular_values,
            rank,
            condition,
        })
    }

    pub fn singular_values(&self) -> &DVector<f64> {
        &self.singular_values
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ill_conditioned(&self) -> bool {
        self.ill_conditioned
    }

    /// Minimum-norm least-squares solution for one right-hand side.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.v_t.ncols();
        let mut coeffs = self.u.tr_mul(b);
        for k in 0..coeffs.len() {
            coeffs[k] = if k < self.rank { coeffs[k] / self.singular_values[k] } else { 0.0 };
        }
        let mut x = DVector::zeros(n);
        for k in 0..self.rank {
            x.axpy(coeffs[k], &self.v_t.row(k).transpose(), 1.0);
        }
        x
    }

    pub fn solution(&self, b: &DVector<f64>) -> LstsqSolution {
        LstsqSolution {
            solution: self.solve(b),
            condition: self.condition,
            rank: self.rank,
            ill_conditioned: self.ill_conditioned,
        }
    }
}

/// Minimum-norm least-squares solution of `A x = b` via SVD.
pub fn lstsq_svd(a: &DMatrix<f64>, b: &DVector<f64>, max_condition: f64) -> Result<LstsqSolution> {
    if a.nrows() != b.len() {
        return Err(Error::InvalidInput(format!(
            "right-hand side has {} rows, matrix has {}",
            b.len(),
            a.nrows()
        )));
    }
    Ok(SvdSolver::new(a, max_condition)?.solution(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let v = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        Rotation::exp(&v)
    }

    fn times(a: &DMatrix<f64>, m: &Mat3) -> DMatrix<f64> {
        a * DMatrix::from_column_slice(3, 3, m.as_slice())
    }

    fn random_rows(rng: &mut impl Rng, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, 3, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn skew_zero_and_basis() {
        assert_eq!(skew(&Vec3::zeros()), Mat3::zeros());
        let s = skew(&Vec3::z());
        assert_eq!(s * Vec3::x(), Vec3::y());
    }

    #[test]
    fn skew_matches_componentwise_cross() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = Vec3::new(rng.random(), rng.random(), rng.random());
            let w = Vec3::new(rng.random(), rng.random(), rng.random());
            let cross = Vec3::new(v.y * w.z - v.z * w.y, v.z * w.x - v.x * w.z, v.x * w.y - v.y * w.x);
            assert!((skew(&v) * w - cross).norm() < 1e-15);
        }
    }

    #[test]
    fn skew_has_rank_two() {
        let v = Vec3::new(0.3, -1.2, 2.0);
        let sv = skew(&v).svd(false, false).singular_values;
        assert!(sv[1] > 1e-3);
        assert!(sv[2] < 1e-14);
    }

    #[test]
    fn kabsch_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_rows(&mut rng, 20);
        let r = kabsch_fit(&a, &a).unwrap();
        assert!(r.geodesic(&Rotation::identity()) < 1e-12);
    }

    #[test]
    fn kabsch_recovers_constructed_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let r0 = random_rotation(&mut rng);
            let a = random_rows(&mut rng, 30);
            let b = times(&a, r0.matrix());
            let r = kabsch_fit(&a, &b).unwrap();
            assert!(r.geodesic(&r0) < 1e-10);
        }
    }

    #[test]
    fn kabsch_reflection_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_rows(&mut rng, 25);
        let reflection = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)) * random_rotation(&mut rng).matrix();
        let b = times(&a, &reflection.transpose());
        let r = kabsch_fit(&a, &b).unwrap();
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!(r.orthonormality_error() < 1e-12);
    }

    #[test]
    fn kabsch_rejects_single_direction() {
        let dir = Vec3::new(0.2, 0.5, -0.3);
        let a = DMatrix::from_fn(10, 3, |i, j| dir[j] * (i as f64 + 1.0));
        assert!(matches!(kabsch_fit(&a, &a), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn kabsch_accepts_planar_excitation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = DMatrix::from_fn(10, 3, |_, j| if j == 2 { 0.0 } else { rng.random_range(-1.0..1.0) });
        let r0 = random_rotation(&mut rng);
        let b = times(&a, r0.matrix());
        assert!(kabsch_fit(&a, &b).unwrap().geodesic(&r0) < 1e-10);
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let v = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let jr = right_jacobian(&v);
            let h = 1e-6;
            for j in 0..3 {
                let mut e = Vec3::zeros();
                e[j] = h;
                let plus = (Rotation::exp(&v).transpose() * Rotation::exp(&(v + e))).log();
                let minus = (Rotation::exp(&v).transpose() * Rotation::exp(&(v - e))).log();
                assert!(((plus - minus) / (2.0 * h) - jr.column(j)).norm() < 1e-8);
            }
        }
        assert!((right_jacobian(&Vec3::new(1e-7, 0.0, 0.0)) - Mat3::identity()).norm() < 1e-6);
    }

    #[test]
    fn lstsq_identity() {
        let sol = lstsq_svd(&DMatrix::identity(3, 3), &DVector::from_vec(vec![1.0, 2.0, 3.0]), DEFAULT_MAX_CONDITION)
            .unwrap();
        assert!((sol.solution - DVector::from_vec(vec![1.0, 2.0, 3.0])).norm() < 1e-15);
        assert!((sol.condition - 1.0).abs() < 1e-15);
        assert!(!sol.ill_conditioned);
    }

    #[test]
    fn checked_svd_reconstructs_rotation_block_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let r: Vec<Mat3> = (0..5)
                .map(|_| *Rotation::exp(&Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).matrix())
                .collect();
            let a = DMatrix::from_fn(15, 15, |i, j| if j / 3 <= i / 3 { (r[i / 3].transpose() * r[j / 3])[(i % 3, j % 3)] } else { 0.0 });
            let svd = checked_svd(&a);
            assert!(svd.singular_values.as_slice().windows(2).all(|w| w[0] >= w[1]));
            assert!((svd.recompose().unwrap() - &a).amax() < 1e-13);
        }
    }

    #[test]
    fn lstsq_overdetermined_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = DMatrix::from_fn(12, 4, |_, _| rng.random_range(-1.0..1.0));
        let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
        let sol = lstsq_svd(&a, &(&a * &x), DEFAULT_MAX_CONDITION).unwrap();
        assert!((sol.solution - x).amax() < 1e-12);
    }

    #[test]
    fn lstsq_flags_zero_column() {
        let mut a = DMatrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64 + 1.0);
        a.column_mut(1).fill(0.0);
        let sol = lstsq_svd(&a, &DVector::from_element(6, 1.0), DEFAULT_MAX_CONDITION).unwrap();
        assert!(sol.ill_conditioned);
        assert_eq!(sol.rank, 2);
        assert!(sol.solution[1].abs() < 1e-12);
    }

    #[test]
    fn log_exp_near_pi() {
        let v = Vec3::new(1.0, -2.0, 0.5).normalize() * (std::f64::consts::PI - 1e-9);
        let r = Rotation::exp(&v);
        assert!((r.log() - v).norm() < 1e-6);
        assert!(Rotation::exp(&r.log()).geodesic(&r) < 1e-6);
    }

    fn vec3_strategy() -> impl Strategy<Value = Vec3> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn composition_stays_rotation(a in vec3_strategy(), b in vec3_strategy()) {
            let r = Rotation::exp(&a) * Rotation::exp(&b);
            prop_assert!(r.orthonormality_error() < 1e-12);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn skew_is_antisymmetric_and_annihilates(v in vec3_strategy()) {
            let s = skew(&v);
            prop_assert_eq!(s.transpose(), -s);
            prop_assert!((s * v).norm() < 1e-14);
        }

        #[test]
        fn log_inverts_exp(v in vec3_strategy()) {
            prop_assume!(v.norm() < std::f64::consts::PI - 1e-3);
            prop_assert!((Rotation::exp(&v).log() - v).norm() < 1e-10);
        }

        #[test]
        fn kabsch_invariant_to_duplicated_rows(seed in 0u64..1000, dup in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_rows(&mut rng, 8);
            let r0 = random_rotation(&mut rng);
            let b = times(&a, r0.matrix());
            let base = kabsch_fit(&a, &b).unwrap();
            let rows: Vec<usize> = (0..8).chain((0..dup).map(|k| k % 8)).collect();
            let a2 = a.select_rows(rows.iter());
            let b2 = b.select_rows(rows.iter());
            prop_assert!(kabsch_fit(&a2, &b2).unwrap().geodesic(&base) < 1e-10);
            // Whole-log duplication scales A^T B and leaves the fit unchanged even for inconsistent data.
            let noisy = &b + random_rows(&mut rng, 8) * 0.3;
            let once = kabsch_fit(&a, &noisy).unwrap();
            let twice = kabsch_fit(&DMatrix::from_fn(16, 3, |i, j| a[(i % 8, j)]),
                                   &DMatrix::from_fn(16, 3, |i, j| noisy[(i % 8, j)])).unwrap();
            prop_assert!(twice.geodesic(&once) < 1e-10);
        }

        #[test]
        fn lstsq_residual_is_minimal(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(9, 4, |_, _| rng.random_range(-1.0..1.0));
            let b = DVector::from_fn(9, |_, _| rng.random_range(-1.0..1.0));
            let x = lstsq_svd(&a, &b, DEFAULT_MAX_CONDITION).unwrap().solution;
            let best = (&a * &x - &b).norm();
            for _ in 0..100 {
                let y = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
                prop_assert!(best <= (&a * &y - &b).norm() + 1e-9);
            }
        }
    }
}
