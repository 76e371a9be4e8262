//! GMM estimation on the low-dimensional instruments and the
//! cluster-robust Wald statistic.

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusterPartition, TransformedDesign};
use crate::error::{CcivError, Result};
use crate::linalg::SymMatrix;

/// Weighting matrix for the low-dimensional GMM estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `Â = (zᵀz)⁻¹`
    #[default]
    Tsls,
    /// `Â = Ω̂⁻¹` with `Ω̂` built from two-stage least squares residuals.
    OptimalGmm,
}

impl std::str::FromStr for Weighting {
    type Err = CcivError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsls" | "2sls" => Ok(Weighting::Tsls),
            "gmm" | "optimal" | "optimal-gmm" | "optimal_gmm" => Ok(Weighting::OptimalGmm),
            other => Err(CcivError::InvalidInput(format!("unknown weighting `{other}`"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Tsls => "tsls",
            Weighting::OptimalGmm => "gmm",
        })
    }
}

/// `β̂₁` together with the pieces every later statistic reuses.
#[derive(Debug, Clone)]
pub struct GmmEstimate {
    pub beta1_hat: f64,
    pub a_hat: SymMatrix,
    /// `zᵀX`
    pub zx: DVector<f64>,
    /// `XᵀzÂzᵀX`
    pub bread: f64,
    /// `X́ = zÂzᵀX`
    pub x_acute: DVector<f64>,
}

fn estimate_with(design: &TransformedDesign, a_hat: SymMatrix) -> Result<GmmEstimate> {
    let z = &design.lowdim_iv;
    let zx = z.tr_mul(&design.x);
    let zy = z.tr_mul(&design.y);
    let a_zx = a_hat.as_matrix() * &zx;
    let bread = zx.dot(&a_zx);
    let scale = design.x.norm_squared();
    if !(bread > 1e-12 * scale) {
        return Err(CcivError::WeakDesign(format!(
            "XᵀzÂzᵀX = {bread:e} is degenerate relative to ‖X‖² = {scale:e}"
        )));
    }
    let beta1_hat = zy.dot(&a_zx) / bread;
    let x_acute = z * &a_zx;
    Ok(GmmEstimate {
        beta1_hat,
        a_hat,
        zx,
        bread,
        x_acute,
    })
}

/// `β̂₁ = (XᵀzÂzᵀX)⁻¹ XᵀzÂzᵀY`.
pub fn gmm_beta1(design: &TransformedDesign, weighting: Weighting) -> Result<GmmEstimate> {
    let z = &design.lowdim_iv;
    let tsls_weight = SymMatrix::mirror_lower(z.tr_mul(z)).inverse()?;
    let tsls = estimate_with(design, tsls_weight)?;
    match weighting {
        Weighting::Tsls => Ok(tsls),
        Weighting::OptimalGmm => {
            let resid = &design.y - &design.x * tsls.beta1_hat;
            let omega = cluster_meat(z, &resid, &design.partition);
            estimate_with(design, omega.inverse()?)
        }
    }
}

/// `Ω̂ = Σ_g (Σ_{i∈I_g} zᵢ êᵢ)(Σ_{i∈I_g} zᵢ êᵢ)ᵀ`.
pub fn cluster_meat(z: &DMatrix<f64>, resid: &DVector<f64>, partition: &ClusterPartition) -> SymMatrix {
    let d = z.ncols();
    let mut meat = DMatrix::zeros(d, d);
    for r in partition.ranges() {
        let score = z.rows_range(r.clone()).tr_mul(&resid.rows_range(r));
        meat.ger(1.0, &score, &score, 1.0);
    }
    SymMatrix::mirror_lower(meat)
}

/// Variance pieces of the Wald statistic for a given residual vector.
#[derive(Debug, Clone)]
pub struct WaldComponents {
    pub beta1_hat: f64,
    pub a_hat: SymMatrix,
    pub omega_hat: SymMatrix,
    /// `XᵀzÂ Ω̂ ÂzᵀX`
    pub psi_hat: f64,
    /// `Ψ̂ / (XᵀzÂzᵀX)²`
    pub phi1_hat: f64,
    pub x_acute: DVector<f64>,
}

impl WaldComponents {
    /// Builds `Ω̂`, `Ψ̂` and `Φ̂₁` from `resid`. `meat_scale` multiplies
    /// `Ω̂` (1 for the plain estimator, `G/(G−1)` for the small-sample
    /// variant).
    pub fn new(
        design: &TransformedDesign,
        gmm: &GmmEstimate,
        resid: &DVector<f64>,
        meat_scale: f64,
    ) -> Result<Self> {
        let mut omega_hat = cluster_meat(&design.lowdim_iv, resid, &design.partition);
        if meat_scale != 1.0 {
            omega_hat = SymMatrix::mirror_lower(omega_hat.into_matrix() * meat_scale);
        }
        let a_zx = gmm.a_hat.as_matrix() * &gmm.zx;
        let psi_hat = a_zx.dot(&(omega_hat.as_matrix() * &a_zx));
        let phi1_hat = psi_hat / (gmm.bread * gmm.bread);
        if !(phi1_hat > 0.0) || !phi1_hat.is_finite() {
            return Err(CcivError::Variance(format!("Φ̂₁ = {phi1_hat:e}")));
        }
        Ok(Self {
            beta1_hat: gmm.beta1_hat,
            a_hat: gmm.a_hat.clone(),
            omega_hat,
            psi_hat,
            phi1_hat,
            x_acute: gmm.x_acute.clone(),
        })
    }
}

/// `T(β₀) = (β̂₁ − β₀) / √Φ̂₁`.
pub fn wald_stat(components: &WaldComponents, beta0: f64) -> Result<f64> {
    if !(components.phi1_hat > 0.0) {
        return Err(CcivError::Variance(format!("Φ̂₁ = {:e}", components.phi1_hat)));
    }
    Ok((components.beta1_hat - beta0) / components.phi1_hat.sqrt())
}

/// Largest single-cluster share of `Σᵢ X́ᵢ²`. Small values are what the
/// low-dimensional asymptotics need; this is reported, never enforced.
pub fn lowdim_max_cluster_share(x_acute: &DVector<f64>, partition: &ClusterPartition) -> f64 {
    let total = x_acute.norm_squared();
    if total == 0.0 {
        return f64::NAN;
    }
    partition
        .ranges()
        .map(|r| x_acute.rows_range(r).norm_squared())
        .fold(0.0, f64::max)
        / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{partial_out, ClusterPartition, ClusteredIVData};
    use crate::testutil::{random_data, random_data_dz};

    #[test]
    fn instrument_equal_to_regressor_gives_ols() {
        let base = random_data(21, vec![3; 8], 0, 3);
        let x = base.x().clone();
        let data = base
            .with_instruments(base.many_iv().clone(), DMatrix::from_column_slice(x.len(), 1, x.as_slice()))
            .unwrap();
        let design = partial_out(&data).unwrap();
        let est = gmm_beta1(&design, Weighting::Tsls).unwrap();
        let ols = design.x.dot(&design.y) / design.x.dot(&design.x);
        assert!((est.beta1_hat - ols).abs() < 1e-12);
    }

    #[test]
    fn tsls_invariant_to_instrument_rotation() {
        let data = random_data_dz(22, vec![2, 3, 4, 3, 2, 4], 1, 4, 2);
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, -1.0, 1.5]);
        let rotated = data
            .with_instruments(data.many_iv().clone(), data.lowdim_iv() * &b)
            .unwrap();
        for w in [Weighting::Tsls, Weighting::OptimalGmm] {
            let d1 = partial_out(&data).unwrap();
            let d2 = partial_out(&rotated).unwrap();
            let e1 = gmm_beta1(&d1, w).unwrap();
            let e2 = gmm_beta1(&d2, w).unwrap();
            assert!((e1.beta1_hat - e2.beta1_hat).abs() < 1e-9);
            let resid = &d1.y - &d1.x * 0.1;
            let c1 = WaldComponents::new(&d1, &e1, &resid, 1.0).unwrap();
            let c2 = WaldComponents::new(&d2, &e2, &resid, 1.0).unwrap();
            assert!((c1.phi1_hat / c2.phi1_hat - 1.0).abs() < 1e-8);
            let t1 = wald_stat(&c1, 0.2).unwrap();
            let t2 = wald_stat(&c2, 0.2).unwrap();
            assert!((t1 / t2 - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn singleton_meat_is_heteroskedastic_sum() {
        let data = random_data_dz(23, vec![1; 9], 0, 2, 2);
        let z = data.lowdim_iv();
        let resid = data.y().clone();
        let meat = cluster_meat(z, &resid, data.partition());
        let mut expected = DMatrix::zeros(2, 2);
        for i in 0..9 {
            let zi = z.row(i).transpose();
            expected += &zi * zi.transpose() * resid[i].powi(2);
        }
        assert!((meat.as_matrix() - expected).amax() < 1e-14);
        let zero = cluster_meat(z, &DVector::zeros(9), data.partition());
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn meat_matches_per_cluster_accumulation() {
        let data = random_data_dz(24, vec![3, 1, 4, 2], 0, 2, 2);
        let z = data.lowdim_iv();
        let resid = data.y();
        let meat = cluster_meat(z, resid, data.partition());
        let mut expected = DMatrix::<f64>::zeros(2, 2);
        for r in data.partition().ranges() {
            let mut s = [0.0; 2];
            for i in r {
                for a in 0..2 {
                    s[a] += z[(i, a)] * resid[i];
                }
            }
            for a in 0..2 {
                for b in 0..2 {
                    expected[(a, b)] += s[a] * s[b];
                }
            }
        }
        assert!((meat.as_matrix() - expected).amax() <= 1e-12);
    }

    #[test]
    fn wald_zero_at_estimate_and_scale_equivariance() {
        let data = random_data(25, vec![3; 10], 1, 3);
        let d = partial_out(&data).unwrap();
        let est = gmm_beta1(&d, Weighting::Tsls).unwrap();
        let resid = &d.y - &d.x * est.beta1_hat;
        let c = WaldComponents::new(&d, &est, &resid, 1.0).unwrap();
        assert_eq!(wald_stat(&c, est.beta1_hat).unwrap(), 0.0);

        let doubled = WaldComponents::new(&d, &est, &(&resid * 2.0), 1.0).unwrap();
        assert!((doubled.phi1_hat / c.phi1_hat - 4.0).abs() < 1e-12);
        let beta0 = est.beta1_hat - 0.5;
        let ratio = wald_stat(&doubled, beta0).unwrap() / wald_stat(&c, beta0).unwrap();
        assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_instrument_is_weak_design() {
        let data = random_data(26, vec![2; 6], 0, 2);
        let n = data.n();
        // Orthogonal to X by construction.
        let x = data.x();
        let mut zl = DVector::from_fn(n, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        zl -= x * (x.dot(&zl) / x.dot(x));
        let data = ClusteredIVData::new(
            data.y().clone(),
            x.clone(),
            DMatrix::zeros(n, 0),
            data.many_iv().clone(),
            DMatrix::from_column_slice(n, 1, zl.as_slice()),
            ClusterPartition::new(vec![2; 6]).unwrap(),
        )
        .unwrap();
        let d = partial_out(&data).unwrap();
        assert!(matches!(gmm_beta1(&d, Weighting::Tsls), Err(CcivError::WeakDesign(_))));
    }

    #[test]
    fn zero_residuals_are_variance_error() {
        let data = random_data(27, vec![2; 6], 0, 2);
        let d = partial_out(&data).unwrap();
        let est = gmm_beta1(&d, Weighting::Tsls).unwrap();
        assert!(matches!(
            WaldComponents::new(&d, &est, &DVector::zeros(12), 1.0),
            Err(CcivError::Variance(_))
        ));
    }
}
