//! Small dense kernels shared by the estimators: SPD solves, Sherman–Morrison
//! inverse maintenance, extreme eigen/singular values, log-determinants and
//! random orthonormal bases.
//!
//! Dimensions are small (d ≤ ~50) so everything is dense and factorizations
//! are recomputed freely. Storage and factorizations come from `nalgebra`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub type RealVector = DVector<f64>;

const SYMMETRY_TOL: f64 = 1e-12;

/// Below this value `1 + xᵀA⁻¹x` can only come from a corrupted inverse.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-14;

/// Iteration cap for the eigen and singular value solvers, per dimension.
pub const ITERATIONS_PER_DIM: usize = 1000;

/// A dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps `m`, checking squareness and symmetry to 1e-12 relative.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidParams("matrix dimension must be ≥ 1".into()));
        }
        let scale = m.amax().max(1.0);
        let asymmetry = (&m - m.transpose()).amax();
        if asymmetry > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(SymMatrix(m))
    }

    /// `s·I` of dimension `d`.
    pub fn scaled_identity(d: usize, s: f64) -> Self {
        SymMatrix(DMatrix::identity(d, d) * s)
    }

    pub fn zeros(d: usize) -> Self {
        SymMatrix(DMatrix::zeros(d, d))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// In-place `A ← A + xxᵀ`, exactly symmetric.
    pub fn add_outer(&mut self, x: &RealVector) {
        self.0.ger(1.0, x, x, 1.0);
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    /// `xᵀ A x`.
    pub fn quad_form(&self, x: &RealVector) -> f64 {
        x.dot(&(&self.0 * x))
    }

    pub fn mul_vec(&self, x: &RealVector) -> RealVector {
        &self.0 * x
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

fn cholesky(a: &SymMatrix) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(a.0.clone()).ok_or(Error::NotPositiveDefinite)
}

/// Solves `Ax = b` for symmetric positive definite `A` by Cholesky.
pub fn spd_solve(a: &SymMatrix, b: &RealVector) -> Result<RealVector> {
    check_dim(a.dim(), b.len())?;
    Ok(cholesky(a)?.solve(b))
}

/// `A⁻¹` by Cholesky. Used to cross-check maintained inverses.
pub fn spd_inverse(a: &SymMatrix) -> Result<SymMatrix> {
    let inv = cholesky(a)?.inverse();
    // Symmetrize away round-off so the result satisfies the type invariant.
    Ok(SymMatrix((&inv + inv.transpose()) * 0.5))
}

/// Result of a Sherman–Morrison update.
#[derive(Debug, Clone)]
pub struct RankOneUpdate {
    pub matrix: SymMatrix,
    pub inverse: SymMatrix,
    /// `1 + xᵀA⁻¹x` before the update.
    pub denominator: f64,
}

/// Returns `(A + xxᵀ, (A + xxᵀ)⁻¹)`, the inverse maintained by
/// `(A + xxᵀ)⁻¹ = A⁻¹ − (A⁻¹x)(A⁻¹x)ᵀ / (1 + xᵀA⁻¹x)`.
pub fn rank_one_update(a: &SymMatrix, a_inv: &SymMatrix, x: &RealVector) -> Result<RankOneUpdate> {
    let mut matrix = a.clone();
    let mut inverse = a_inv.clone();
    let denominator = rank_one_update_in_place(&mut matrix, &mut inverse, x)?;
    Ok(RankOneUpdate {
        matrix,
        inverse,
        denominator,
    })
}

/// In-place variant of [`rank_one_update`]; returns the denominator.
pub fn rank_one_update_in_place(
    a: &mut SymMatrix,
    a_inv: &mut SymMatrix,
    x: &RealVector,
) -> Result<f64> {
    check_dim(a.dim(), x.len())?;
    check_dim(a.dim(), a_inv.dim())?;
    let u = a_inv.mul_vec(x);
    let denominator = 1.0 + x.dot(&u);
    if !(denominator > DEGENERATE_DENOMINATOR) {
        return Err(Error::DegenerateUpdate { denominator });
    }
    a.add_outer(x);
    a_inv.0.ger(-1.0 / denominator, &u, &u, 1.0);
    Ok(denominator)
}

fn iteration_cap(d: usize) -> usize {
    (ITERATIONS_PER_DIM * d).max(1)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eig_extremes(a: &SymMatrix) -> Result<(f64, f64)> {
    let cap = iteration_cap(a.dim());
    let eig = SymmetricEigen::try_new(a.0.clone(), f64::EPSILON, cap).ok_or(Error::NoConvergence {
        what: "symmetric eigendecomposition",
        iterations: cap,
    })?;
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    Ok((min, max))
}

/// Largest singular value of a square (or rectangular) matrix.
pub fn max_singular(a: &DMatrix<f64>) -> Result<f64> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("matrix has non-finite entries".into()));
    }
    let cap = iteration_cap(a.nrows().max(a.ncols()));
    let svd = SVD::try_new(a.clone(), false, false, f64::EPSILON, cap).ok_or(Error::NoConvergence {
        what: "singular value decomposition",
        iterations: cap,
    })?;
    Ok(svd.singular_values.max())
}

/// `log det(V) − d·log λ`, from the Cholesky factor.
pub fn log_det_ratio(v_lambda: &SymMatrix, lambda: f64, d: usize) -> Result<f64> {
    check_dim(v_lambda.dim(), d)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParams(format!("lambda must be positive, got {lambda}")));
    }
    let chol = cholesky(v_lambda)?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
    Ok(log_det - d as f64 * lambda.ln())
}

/// Q factor of the QR decomposition of a seeded standard-normal d×d matrix.
pub fn qr_orthonormal_basis(seed: u64, d: usize) -> DMatrix<f64> {
    let mut seed = seed;
    loop {
        let mut rng = rng::from_seed(seed);
        let p: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
        let qr = p.qr();
        let r = qr.r();
        let scale = r.amax().max(f64::MIN_POSITIVE);
        if r.diagonal().iter().all(|v| v.abs() > 1e-12 * scale) {
            return qr.q();
        }
        seed = seed.wrapping_add(1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn seeded_spd(seed: u64, d: usize) -> SymMatrix {
        let mut rng = rng::from_seed(seed);
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::new(m.transpose() * &m + DMatrix::identity(d, d)).unwrap()
    }

    fn seeded_vec(rng: &mut rng::Rng, d: usize) -> RealVector {
        DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))
    }

    // Cofactor expansion, independent of any factorization.
    fn det_cofactor(m: &DMatrix<f64>) -> f64 {
        let n = m.nrows();
        if n == 1 {
            return m[(0, 0)];
        }
        (0..n)
            .map(|j| {
                let minor = m.clone().remove_row(0).remove_column(j);
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * m[(0, j)] * det_cofactor(&minor)
            })
            .sum()
    }

    fn adjugate_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let det = det_cofactor(m);
        DMatrix::from_fn(n, n, |i, j| {
            let minor = m.clone().remove_row(j).remove_column(i);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * det_cofactor(&minor) / det
        })
    }

    // Extreme roots of det(A − σI) located by scanning then bisecting.
    fn charpoly_extremes(a: &DMatrix<f64>) -> (f64, f64) {
        let n = a.nrows();
        let p = |s: f64| det_cofactor(&(a - DMatrix::identity(n, n) * s));
        let radius = (0..n)
            .map(|i| (0..n).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
            + 1.0;
        let steps = 20_000;
        let grid: Vec<f64> = (0..=steps)
            .map(|k| -radius + 2.0 * radius * k as f64 / steps as f64)
            .collect();
        let bisect = |mut lo: f64, mut hi: f64| {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if p(lo).signum() == p(mid).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let brackets: Vec<(f64, f64)> = grid
            .windows(2)
            .filter(|w| p(w[0]).signum() != p(w[1]).signum())
            .map(|w| (w[0], w[1]))
            .collect();
        let first = brackets.first().unwrap();
        let last = brackets.last().unwrap();
        (bisect(first.0, first.1), bisect(last.0, last.1))
    }

    #[test]
    fn solve_identity_and_diagonal() {
        let x = spd_solve(
            &SymMatrix::scaled_identity(3, 1.0),
            &DVector::from_vec(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(x.as_slice(), &[1.0, 2.0, 3.0]);
        let x = spd_solve(
            &SymMatrix::from_diagonal(&[2.0, 4.0]),
            &DVector::from_vec(vec![2.0, 4.0]),
        )
        .unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn solve_matches_adjugate_inverse() {
        let a = seeded_spd(11, 5);
        let mut rng = rng::from_seed(12);
        let b = seeded_vec(&mut rng, 5);
        let x = spd_solve(&a, &b).unwrap();
        let expected = adjugate_inverse(a.as_matrix()) * &b;
        for i in 0..5 {
            assert!((x[i] - expected[i]).abs() <= 1e-8, "{} vs {}", x[i], expected[i]);
        }
        let residual = (a.as_matrix() * &x - &b).norm();
        assert!(residual <= 1e-9 * (a.as_matrix().norm() * x.norm() + b.norm()));
    }

    #[test]
    fn solve_errors() {
        let not_pd = SymMatrix::from_diagonal(&[1.0, -1.0]);
        assert!(matches!(
            spd_solve(&not_pd, &DVector::from_vec(vec![1.0, 1.0])),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(matches!(
            spd_solve(&SymMatrix::scaled_identity(2, 1.0), &DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(SymMatrix::new(m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn axis_update() {
        let eye = SymMatrix::scaled_identity(2, 1.0);
        let up = rank_one_update(&eye, &eye, &DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert_eq!(up.matrix, SymMatrix::from_diagonal(&[2.0, 1.0]));
        assert_eq!(up.inverse, SymMatrix::from_diagonal(&[0.5, 1.0]));
        assert_eq!(up.denominator, 2.0);
    }

    #[test]
    fn zero_update_is_identity() {
        let a = seeded_spd(3, 4);
        let inv = spd_inverse(&a).unwrap();
        let up = rank_one_update(&a, &inv, &DVector::zeros(4)).unwrap();
        assert_eq!(up.matrix, a);
        assert_eq!(up.inverse, inv);
    }

    #[test]
    fn degenerate_update_detected() {
        // A corrupted "inverse" that is negative definite.
        let a = SymMatrix::scaled_identity(2, 1.0);
        let bad = SymMatrix::scaled_identity(2, -1.0);
        let err = rank_one_update(&a, &bad, &DVector::from_vec(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateUpdate { .. }));
    }

    #[test]
    fn sequential_updates_match_reinversion() {
        let mut rng = rng::from_seed(99);
        let mut a = SymMatrix::scaled_identity(6, 1.0);
        let mut inv = a.clone();
        for _ in 0..20 {
            let x = seeded_vec(&mut rng, 6);
            rank_one_update_in_place(&mut a, &mut inv, &x).unwrap();
        }
        let direct = DMatrix::from_columns(
            &(0..6)
                .map(|j| {
                    let mut e = DVector::zeros(6);
                    e[j] = 1.0;
                    spd_solve(&a, &e).unwrap()
                })
                .collect::<Vec<_>>(),
        );
        assert!((inv.as_matrix() - direct).amax() <= 1e-8);
    }

    #[test]
    fn eig_extremes_simple() {
        assert_eq!(eig_extremes(&SymMatrix::scaled_identity(4, 1.0)).unwrap(), (1.0, 1.0));
        let (lo, hi) = eig_extremes(&SymMatrix::from_diagonal(&[2.0, 5.0, 9.0])).unwrap();
        assert_relative_eq!(lo, 2.0, max_relative = 1e-12);
        assert_relative_eq!(hi, 9.0, max_relative = 1e-12);
    }

    #[test]
    fn eig_extremes_match_characteristic_polynomial() {
        let mut rng = rng::from_seed(4);
        let m = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-2.0..2.0));
        let s = SymMatrix::new(&m + m.transpose()).unwrap();
        let (lo, hi) = eig_extremes(&s).unwrap();
        let (olo, ohi) = charpoly_extremes(s.as_matrix());
        assert!((lo - olo).abs() <= 1e-8 * olo.abs().max(1.0), "{lo} vs {olo}");
        assert!((hi - ohi).abs() <= 1e-8 * ohi.abs().max(1.0), "{hi} vs {ohi}");
    }

    #[test]
    fn max_singular_cases() {
        assert_relative_eq!(max_singular(&DMatrix::identity(3, 3)).unwrap(), 1.0, max_relative = 1e-12);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -7.0]));
        assert_relative_eq!(max_singular(&d).unwrap(), 7.0, max_relative = 1e-12);
        let mut rng = rng::from_seed(8);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let gram = SymMatrix::new(a.transpose() * &a).unwrap();
        let (_, hi) = eig_extremes(&gram).unwrap();
        assert_relative_eq!(max_singular(&a).unwrap(), hi.sqrt(), max_relative = 1e-8);
    }

    #[test]
    fn log_det_ratio_cases() {
        let v = SymMatrix::scaled_identity(3, 2.5);
        assert!(log_det_ratio(&v, 2.5, 3).unwrap().abs() < 1e-14);
        let e = std::f64::consts::E;
        let v = SymMatrix::from_diagonal(&[e, e * e]);
        assert_relative_eq!(log_det_ratio(&v, 1.0, 2).unwrap(), 3.0, epsilon = 1e-12);
        // Matrix determinant lemma: det(I + xxᵀ) = 1 + ‖x‖².
        let mut v = SymMatrix::scaled_identity(2, 1.0);
        v.add_outer(&DVector::from_vec(vec![1.0, 1.0]));
        assert_relative_eq!(log_det_ratio(&v, 1.0, 2).unwrap(), 3f64.ln(), epsilon = 1e-12);
        assert!(matches!(
            log_det_ratio(&SymMatrix::from_diagonal(&[1.0, -1.0]), 1.0, 2),
            Err(Error::NotPositiveDefinite)
        ));
    }

    #[test]
    fn qr_basis_properties() {
        let q1 = qr_orthonormal_basis(5, 1);
        assert_relative_eq!(q1[(0, 0)].abs(), 1.0, epsilon = 1e-15);
        let q = qr_orthonormal_basis(17, 8);
        let gram = q.transpose() * &q - DMatrix::identity(8, 8);
        assert!(gram.amax() <= 1e-10);
        assert_eq!(q, qr_orthonormal_basis(17, 8));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sherman_morrison_solve_agrees(seed in any::<u64>(), d in 2usize..=20) {
            let a = seeded_spd(seed, d);
            let inv = spd_inverse(&a).unwrap();
            let mut rng = rng::from_seed(seed ^ 0xabc);
            let x = seeded_vec(&mut rng, d);
            let b = seeded_vec(&mut rng, d);
            let up = rank_one_update(&a, &inv, &x).unwrap();
            let direct = spd_solve(&up.matrix, &b).unwrap();
            let maintained = up.inverse.mul_vec(&b);
            prop_assert!((direct - maintained).amax() <= 1e-8);
        }

        #[test]
        fn log_det_additive_under_update(seed in any::<u64>(), d in 1usize..=12, lambda in 0.1f64..10.0) {
            let mut rng = rng::from_seed(seed);
            let mut v = SymMatrix::scaled_identity(d, lambda);
            for _ in 0..3 {
                v.add_outer(&seeded_vec(&mut rng, d));
            }
            let x = seeded_vec(&mut rng, d);
            let before = log_det_ratio(&v, lambda, d).unwrap();
            let gain = (1.0 + x.dot(&spd_solve(&v, &x).unwrap())).ln();
            v.add_outer(&x);
            let after = log_det_ratio(&v, lambda, d).unwrap();
            prop_assert!((after - before - gain).abs() <= 1e-8);
        }

        #[test]
        fn regularization_lifts_min_eigenvalue(seed in any::<u64>(), d in 1usize..=10, lambda in 0.0f64..100.0) {
            let mut rng = rng::from_seed(seed);
            let mut m = SymMatrix::zeros(d);
            for _ in 0..d / 2 + 1 {
                m.add_outer(&seeded_vec(&mut rng, d));
            }
            let (m_min, _) = eig_extremes(&m).unwrap();
            let (r_min, _) = eig_extremes(&m.add(&SymMatrix::scaled_identity(d, lambda))).unwrap();
            prop_assert!(r_min >= lambda + m_min - 1e-8);
        }

        #[test]
        fn basis_columns_orthonormal(seed in any::<u64>(), d in 1usize..=16) {
            let q = qr_orthonormal_basis(seed, d);
            for i in 0..d {
                prop_assert!((q.column(i).norm() - 1.0).abs() <= 1e-10);
                for j in 0..i {
                    prop_assert!(q.column(i).dot(&q.column(j)).abs() <= 1e-10);
                }
            }
        }
    }
}
