//! Dense symmetric linear algebra shared by the statistical modules.
//!
//! Everything here is a pure function of its inputs. Matrices are
//! `nalgebra::DMatrix<f64>`; [`SymMatrix`] adds an exact-symmetry guarantee
//! on top.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::erf;

use crate::error::{CcivError, Result};

/// Upper bound on the condition number of any Gram matrix we invert.
pub const MAX_CONDITION: f64 = 1e12;

/// Default floor for the smallest eigenvalue accepted by [`inv_sqrt_psd`].
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-8;

const EIG_MAX_ITER: usize = 10_000;

/// A square matrix whose entries satisfy `m[(i, j)] == m[(j, i)]` bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Checks squareness, finiteness and approximate symmetry (relative
    /// 1e-10), then mirrors the lower triangle onto the upper one.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(CcivError::InvalidInput(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CcivError::InvalidInput("matrix has non-finite entries".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                    return Err(CcivError::InvalidInput(format!(
                        "matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self::mirror_lower(m))
    }

    /// Mirrors the lower triangle without any checks. Callers guarantee the
    /// input is symmetric up to rounding.
    pub(crate) fn mirror_lower(mut m: DMatrix<f64>) -> Self {
        let n = m.nrows();
        for j in 0..n {
            for i in (j + 1)..n {
                m[(j, i)] = m[(i, j)];
            }
        }
        SymMatrix(m)
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
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

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Inverse through the eigendecomposition, refusing anything with a
    /// condition number above [`MAX_CONDITION`].
    pub fn inverse(&self) -> Result<SymMatrix> {
        let eig = sym_eig(self)?;
        let max = eig.eigenvalues[0];
        let min = eig.eigenvalues[eig.eigenvalues.len() - 1];
        if min <= 0.0 || max / min > MAX_CONDITION {
            return Err(CcivError::RankDeficient {
                condition: condition_from(max, min),
            });
        }
        Ok(eig.map_eigenvalues(|l| 1.0 / l))
    }
}

impl Deref for SymMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn condition_from(max: f64, min: f64) -> f64 {
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Spectral decomposition `V diag(λ) Vᵀ` with eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomposition {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn map_eigenvalues(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mut scaled = self.eigenvectors.clone();
        for (k, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.eigenvalues[k]);
        }
        SymMatrix::mirror_lower(scaled * self.eigenvectors.transpose())
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map_eigenvalues(|l| l)
    }

    pub fn condition_number(&self) -> f64 {
        let n = self.eigenvalues.len();
        if n == 0 {
            return 1.0;
        }
        condition_from(self.eigenvalues[0], self.eigenvalues[n - 1])
    }
}

/// Symmetric eigendecomposition (implicit QL on the tridiagonal form).
pub fn sym_eig(m: &SymMatrix) -> Result<EigDecomposition> {
    let n = m.dim();
    if n == 0 {
        return Ok(EigDecomposition {
            eigenvalues: DVector::zeros(0),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(m.as_matrix().clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or_else(|| {
            CcivError::NumericalFailure(format!(
                "eigendecomposition of {n}x{n} matrix did not converge"
            ))
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let eigenvectors = DMatrix::from_columns(
        &order
            .iter()
            .map(|&k| eig.eigenvectors.column(k).into_owned())
            .collect::<Vec<_>>(),
    );
    Ok(EigDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Symmetric inverse square root `M^{-1/2}` from the eigen branch.
pub fn inv_sqrt_psd(m: &SymMatrix, eigen_floor: f64) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    let n = eig.eigenvalues.len();
    if n == 0 {
        return Ok(SymMatrix::identity(0));
    }
    let min = eig.eigenvalues[n - 1];
    if min < eigen_floor {
        return Err(CcivError::IllConditioned { min_eigenvalue: min });
    }
    Ok(eig.map_eigenvalues(|l| 1.0 / l.sqrt()))
}

/// Orthonormal basis of `col(A)` together with the condition number of `AᵀA`.
///
/// Fails with `RankDeficient` when the condition number exceeds
/// [`MAX_CONDITION`] or `A` has more columns than rows.
pub fn orthonormal_basis(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let (n, k) = a.shape();
    if k == 0 {
        return Ok((DMatrix::zeros(n, 0), 1.0));
    }
    if k > n {
        return Err(CcivError::RankDeficient {
            condition: f64::INFINITY,
        });
    }
    let gram = SymMatrix::mirror_lower(a.tr_mul(a));
    let cond = sym_eig(&gram)?.condition_number();
    if !(cond <= MAX_CONDITION) {
        return Err(CcivError::RankDeficient { condition: cond });
    }
    let q = a.clone().qr().q();
    Ok((q, cond))
}

/// Orthogonal projection `A (AᵀA)^{-1} Aᵀ` onto the column space of `A`.
pub fn projection(a: &DMatrix<f64>) -> Result<SymMatrix> {
    let (q, _) = orthonormal_basis(a)?;
    Ok(projection_from_basis(&q))
}

pub(crate) fn projection_from_basis(q: &DMatrix<f64>) -> SymMatrix {
    SymMatrix::mirror_lower(q * q.transpose())
}

/// Quantile of the chi-squared distribution with one degree of freedom:
/// the value `c` with `P(χ²₁ ≤ c) = prob`.
pub fn chi2_quantile(prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(CcivError::InvalidInput(format!(
            "chi-squared quantile needs prob in (0, 1), got {prob}"
        )));
    }
    // χ²₁ = N(0,1)², so the quantile is 2·erfinv(p)². Polish with Newton on
    // the complementary CDF, which keeps precision in the upper tail.
    let upper = 1.0 - prob;
    let mut x = 2.0 * erf::erf_inv(prob).powi(2);
    for _ in 0..8 {
        if x <= 0.0 {
            break;
        }
        let resid = libm::erfc((x / 2.0).sqrt()) - upper;
        let density = (-x / 2.0).exp() / (2.0 * std::f64::consts::PI * x).sqrt();
        let step = resid / density;
        x += step;
        if step.abs() <= 1e-15 * x {
            break;
        }
    }
    Ok(x.max(0.0))
}

/// Largest and smallest eigenvalue of a symmetric matrix.
pub(crate) fn extreme_eigenvalues(m: &SymMatrix) -> Result<(f64, f64)> {
    let eig = sym_eig(m)?;
    let n = eig.eigenvalues.len();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((eig.eigenvalues[0], eig.eigenvalues[n - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::function::gamma::gamma_lr;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let a = random_matrix(rng, n, n);
        SymMatrix::new(&a + a.transpose()).unwrap()
    }

    // Bisection on the regularized lower incomplete gamma P(1/2, x/2).
    fn chi2_quantile_oracle(prob: f64) -> f64 {
        let (mut lo, mut hi) = (0.0_f64, 200.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma_lr(0.5, mid / 2.0) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let eig = sym_eig(&SymMatrix::identity(3)).unwrap();
        assert!(eig.eigenvalues.iter().all(|&l| (l - 1.0).abs() < 1e-15));

        let eig = sym_eig(&SymMatrix::from_diagonal(&[1.0, 4.0])).unwrap();
        assert_eq!(eig.eigenvalues.as_slice(), &[4.0, 1.0]);
        assert!((eig.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((eig.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eig_reconstructs_random_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random_sym(&mut rng, 5);
        let eig = sym_eig(&m).unwrap();
        let err = (eig.reconstruct().as_matrix() - m.as_matrix()).amax() / m.amax();
        assert!(err <= 1e-10, "reconstruction error {err}");
        let vtv = eig.eigenvectors.tr_mul(&eig.eigenvectors);
        assert!((vtv - DMatrix::identity(5, 5)).amax() <= 1e-10);
        for w in eig.eigenvalues.as_slice().windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn sym_matrix_rejects_asymmetry() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 1.0]);
        assert!(matches!(SymMatrix::new(m), Err(CcivError::InvalidInput(_))));
    }

    #[test]
    fn inv_sqrt_simple_cases() {
        let r = inv_sqrt_psd(&SymMatrix::identity(3), DEFAULT_EIGEN_FLOOR).unwrap();
        assert!((r.as_matrix() - DMatrix::identity(3, 3)).amax() < 1e-15);

        let four = SymMatrix::from_diagonal(&[4.0, 4.0]);
        let r = inv_sqrt_psd(&four, DEFAULT_EIGEN_FLOOR).unwrap();
        assert!((r.as_matrix() - DMatrix::identity(2, 2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn inv_sqrt_correlation_pattern() {
        let m = SymMatrix::new(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.3, 0.0, 0.3, 1.0, 0.4, 0.0, 0.4, 1.0],
        ))
        .unwrap();
        let r = inv_sqrt_psd(&m, DEFAULT_EIGEN_FLOOR).unwrap();
        let prod = r.as_matrix() * r.as_matrix() * m.as_matrix();
        assert!((prod - DMatrix::identity(3, 3)).amax() <= 1e-10);
        assert_eq!(r.as_matrix(), &r.transpose());
    }

    #[test]
    fn inv_sqrt_rejects_small_eigenvalue() {
        let m = SymMatrix::from_diagonal(&[1.0, 1e-10]);
        match inv_sqrt_psd(&m, DEFAULT_EIGEN_FLOOR) {
            Err(CcivError::IllConditioned { min_eigenvalue }) => {
                assert!((min_eigenvalue - 1e-10).abs() < 1e-20)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn projection_examples() {
        let n = 6;
        let ones = DMatrix::from_element(n, 1, 1.0);
        let p = projection(&ones).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / n as f64).abs() < 1e-15));

        let p = projection(&DMatrix::identity(4, 4)).unwrap();
        assert!((p.as_matrix() - DMatrix::identity(4, 4)).amax() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_matrix(&mut rng, 20, 3);
        let p = projection(&a).unwrap();
        assert!((p.trace() - 3.0).abs() <= 1e-9);
        let pp = p.as_matrix() * p.as_matrix();
        assert!((pp - p.as_matrix()).amax() <= 1e-10);
    }

    #[test]
    fn projection_rejects_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = random_matrix(&mut rng, 10, 3);
        let c0 = a.column(0).into_owned();
        a.set_column(2, &c0);
        assert!(matches!(
            projection(&a),
            Err(CcivError::RankDeficient { .. })
        ));
    }

    #[test]
    fn chi2_quantile_matches_incomplete_gamma_oracle() {
        let expected_95 = chi2_quantile_oracle(0.95);
        let expected_50 = chi2_quantile_oracle(0.5);
        assert!((expected_95 - 3.841458820694124).abs() < 1e-9);
        assert!((expected_50 - 0.454936423119572).abs() < 1e-9);
        assert!((chi2_quantile(0.95).unwrap() - expected_95).abs() < 1e-12);
        assert!((chi2_quantile(0.5).unwrap() - expected_50).abs() < 1e-12);
        for p in [1e-6, 0.01, 0.1, 0.3, 0.7, 0.9, 0.99, 0.999999] {
            let c = chi2_quantile(p).unwrap();
            assert!((gamma_lr(0.5, c / 2.0) - p).abs() <= 1e-10, "p={p}");
        }
        assert!(chi2_quantile(1e-12).unwrap() < 1e-20);
        assert!(chi2_quantile(0.0).is_err());
        assert!(chi2_quantile(1.0).is_err());
        assert!(chi2_quantile(f64::NAN).is_err());
    }

    #[test]
    fn chi2_quantile_strictly_increasing() {
        let values: Vec<f64> = (1..=100)
            .map(|k| chi2_quantile(k as f64 / 101.0).unwrap())
            .collect();
        assert!(values.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn projection_invariant_under_reparameterization(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_matrix(&mut rng, 15, 3);
            let b = random_matrix(&mut rng, 3, 3) + DMatrix::identity(3, 3) * 2.0;
            prop_assume!(b.determinant().abs() > 0.1);
            let p1 = projection(&a).unwrap();
            let p2 = projection(&(&a * &b)).unwrap();
            prop_assert!((p1.as_matrix() - p2.as_matrix()).amax() <= 1e-9);
        }

        #[test]
        fn inv_sqrt_round_trip(seed in 0u64..1000, log_lo in -3.0f64..0.0, log_hi in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, 4, 4).qr().q();
            let eigen = DVector::from_vec(vec![
                10f64.powf(log_lo),
                10f64.powf(log_hi),
                10f64.powf(0.5 * (log_lo + log_hi)),
                1.0,
            ]);
            let m = SymMatrix::new(&q * DMatrix::from_diagonal(&eigen) * q.transpose()).unwrap();
            let r = inv_sqrt_psd(&m, 1e-4).unwrap();
            let prod = r.as_matrix() * r.as_matrix() * m.as_matrix();
            prop_assert!((prod - DMatrix::identity(4, 4)).amax() <= 1e-8);
        }
    }
}
