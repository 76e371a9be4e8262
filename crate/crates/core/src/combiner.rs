//! Combined estimator, nuisance estimates for the optimal combination and
//! the full inference pipeline.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::data::{partial_out, validate_with, ClusteredIVData, TransformedDesign, ValidationOptions};
use crate::error::{CcivError, Result};
use crate::jackknife::{cluster_pair_blocks, variance_phi2, JackknifeComponents};
use crate::linalg::{chi2_quantile, inv_sqrt_psd, SymMatrix, DEFAULT_EIGEN_FLOOR};
use crate::wald::{gmm_beta1, lowdim_max_cluster_share, WaldComponents, Weighting};

/// Default gap kept between `ρ̂₁² + ρ̂₂²` and one.
pub const DEFAULT_RHO_MARGIN: f64 = 1e-6;

fn positive(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CcivError::Variance(format!("{name} = {v:e}")))
    }
}

fn nonzero_d(d_hat: f64) -> Result<f64> {
    if d_hat != 0.0 && d_hat.is_finite() {
        Ok(d_hat)
    } else {
        Err(CcivError::Variance(format!("D̂ = {d_hat:e}")))
    }
}

/// `ω̂ = √(Φ̂₂ᵖʳᵉ/D̂²) / (√Φ̂₁ᵖʳᵉ + √(Φ̂₂ᵖʳᵉ/D̂²))`, the weight on `β̂₁`.
pub fn combine_weight(phi1_pre: f64, phi2_pre: f64, d_hat: f64) -> Result<f64> {
    let sd1 = positive("Φ̂₁ᵖʳᵉ", phi1_pre)?.sqrt();
    let sd2 = positive("Φ̂₂ᵖʳᵉ", phi2_pre)?.sqrt() / nonzero_d(d_hat)?.abs();
    Ok(sd2 / (sd1 + sd2))
}

/// `(1/√(1+r), √r/√(1+r))` with `r = Φ̂₁ / (Φ̂₂/D̂²)`.
pub fn alpha_hats(phi1: f64, phi2: f64, d_hat: f64) -> Result<(f64, f64)> {
    let d = nonzero_d(d_hat)?;
    let r = positive("Φ̂₁", phi1)? * d * d / positive("Φ̂₂", phi2)?;
    let s = (1.0 + r).sqrt();
    Ok((1.0 / s, r.sqrt() / s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoHats {
    pub rho1: f64,
    pub rho2: f64,
    /// Values before clamping.
    pub raw: (f64, f64),
    pub clamped: bool,
}

/// `ρ̂₁` and `ρ̂₂` from their numerators, shrunk radially to norm
/// `√(1 − margin)` when they leave that disk. `margin = None` disables the
/// shrinkage.
pub fn rho_hats_from_sums(
    rho1_sum: f64,
    rho2_sum: f64,
    psi_hat: f64,
    phi2: f64,
    phi3: f64,
    margin: Option<f64>,
) -> Result<RhoHats> {
    let psi = positive("Ψ̂", psi_hat)?;
    let phi2 = positive("Φ̂₂", phi2)?;
    let phi3 = positive("Φ̂₃", phi3)?;
    let r1 = rho1_sum / (psi * phi2).sqrt();
    let r2 = rho2_sum / (phi2 * phi3).sqrt();
    let mut out = RhoHats {
        rho1: r1,
        rho2: r2,
        raw: (r1, r2),
        clamped: false,
    };
    if let Some(margin) = margin {
        let norm2 = r1 * r1 + r2 * r2;
        if norm2 > 1.0 - margin {
            let shrink = ((1.0 - margin) / norm2).sqrt();
            out.rho1 *= shrink;
            out.rho2 *= shrink;
            out.clamped = true;
        }
    }
    Ok(out)
}

/// `Σ_g (Σ_{i∈I_g} X́ᵢêᵢ)(Σ_{i∈I_g} X̂ᵢêᵢ)`
pub fn rho1_numerator(design: &TransformedDesign, resid: &DVector<f64>, x_acute: &DVector<f64>, x_hat: &DVector<f64>) -> f64 {
    design
        .partition
        .ranges()
        .map(|r| {
            let e = resid.rows_range(r.clone());
            x_acute.rows_range(r.clone()).dot(&e) * x_hat.rows_range(r).dot(&e)
        })
        .sum()
}

/// `2 Σ_{g≠h} (X_[g]ᵀ P_[g,h] ê_[h])(ê_[g]ᵀ P_[g,h] ê_[h])`
pub fn rho2_numerator(design: &TransformedDesign, resid: &DVector<f64>) -> f64 {
    let xe = cluster_pair_blocks(&design.x, &design.p, resid, &design.partition);
    let ee = cluster_pair_blocks(resid, &design.p, resid, &design.partition);
    let both = xe.component_mul(&ee);
    2.0 * (both.sum() - both.diagonal().sum())
}

#[allow(clippy::too_many_arguments)]
pub fn rho_hats(
    design: &TransformedDesign,
    resid: &DVector<f64>,
    x_acute: &DVector<f64>,
    x_hat: &DVector<f64>,
    psi_hat: f64,
    phi2: f64,
    phi3: f64,
    margin: Option<f64>,
) -> Result<RhoHats> {
    rho_hats_from_sums(
        rho1_numerator(design, resid, x_acute, x_hat),
        rho2_numerator(design, resid),
        psi_hat,
        phi2,
        phi3,
        margin,
    )
}

/// `[[1, ρ₁, 0], [ρ₁, 1, ρ₂], [0, ρ₂, 1]]`, the limit correlation of
/// `(T, LM, AR)`.
pub fn limit_correlation(rho1: f64, rho2: f64) -> SymMatrix {
    SymMatrix::mirror_lower(DMatrix::from_row_slice(
        3,
        3,
        &[1.0, rho1, 0.0, rho1, 1.0, rho2, 0.0, rho2, 1.0],
    ))
}

/// Estimated weights of the optimal combination.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationWeights {
    pub omega_hat: f64,
    pub alpha1_hat: f64,
    pub alpha2_hat: f64,
    pub rho1_hat: f64,
    pub rho2_hat: f64,
    pub rho_raw: (f64, f64),
    pub clamped: bool,
    /// Inverse square root of the limit correlation matrix.
    pub transform: SymMatrix,
    /// `R (α̂₁, α̂₂, 0)`
    pub b_hat: [f64; 3],
}

impl CombinationWeights {
    pub fn new(omega_hat: f64, alphas: (f64, f64), rhos: RhoHats, eigen_floor: f64) -> Result<Self> {
        let transform = inv_sqrt_psd(&limit_correlation(rhos.rho1, rhos.rho2), eigen_floor)?;
        let b = transform.as_matrix() * DVector::from_column_slice(&[alphas.0, alphas.1, 0.0]);
        Ok(Self {
            omega_hat,
            alpha1_hat: alphas.0,
            alpha2_hat: alphas.1,
            rho1_hat: rhos.rho1,
            rho2_hat: rhos.rho2,
            rho_raw: rhos.raw,
            clamped: rhos.clamped,
            transform,
            b_hat: [b[0], b[1], b[2]],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CombinedTest {
    pub tilde_stats: [f64; 3],
    pub statistic: f64,
    pub critical_value: f64,
    pub reject: bool,
}

/// `((b̂·T̃)/‖b̂‖)²` against the `1 − α` quantile of `χ²₁`.
pub fn combined_test(t: f64, lm: f64, ar: f64, weights: &CombinationWeights, alpha_level: f64) -> Result<CombinedTest> {
    let critical_value = chi2_quantile(1.0 - alpha_level)?;
    Ok(combined_with_critical(t, lm, ar, weights, critical_value))
}

fn combined_with_critical(t: f64, lm: f64, ar: f64, weights: &CombinationWeights, critical_value: f64) -> CombinedTest {
    let r = weights.transform.as_matrix();
    let s = [t, lm, ar];
    let tilde: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| r[(i, j)] * s[j]).sum());
    let b = &weights.b_hat;
    let dot: f64 = (0..3).map(|i| b[i] * tilde[i]).sum();
    let norm2: f64 = b.iter().map(|v| v * v).sum();
    let statistic = dot * dot / norm2;
    CombinedTest {
        tilde_stats: tilde,
        statistic,
        critical_value,
        reject: statistic >= critical_value,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceConfig {
    pub alpha_level: f64,
    pub weighting: Weighting,
    /// Scale `Ω̂` by `G/(G−1)`.
    pub small_sample_correction: bool,
    /// `None` leaves `(ρ̂₁, ρ̂₂)` unclamped.
    pub rho_margin: Option<f64>,
    pub eigen_floor: f64,
    /// Run the regularity checks first and refuse data that fails them.
    pub validate: bool,
    pub validation: ValidationOptions,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            alpha_level: 0.05,
            weighting: Weighting::Tsls,
            small_sample_correction: false,
            rho_margin: Some(DEFAULT_RHO_MARGIN),
            eigen_floor: DEFAULT_EIGEN_FLOOR,
            validate: true,
            validation: ValidationOptions::default(),
        }
    }
}

impl InferenceConfig {
    /// Reads `key = value` lines (`#` starts a comment). Keys: `alpha_level`,
    /// `weighting`, `small_sample_correction`, `rho_margin` (a number or
    /// `none`), `eigen_floor`, `validate`, `max_cluster_size`,
    /// `leverage_margin`, `min_eigenvalue`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CcivError::InvalidInput(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("cannot parse `{v}`"))
            }
            let parsed: std::result::Result<(), String> = (|| {
                match key {
                    "alpha_level" => config.alpha_level = num(value)?,
                    "weighting" => config.weighting = value.parse().map_err(|e: CcivError| e.to_string())?,
                    "small_sample_correction" => config.small_sample_correction = num(value)?,
                    "rho_margin" => {
                        config.rho_margin = if value == "none" { None } else { Some(num(value)?) }
                    }
                    "eigen_floor" => config.eigen_floor = num(value)?,
                    "validate" => config.validate = num(value)?,
                    "max_cluster_size" => config.validation.max_cluster_size = num(value)?,
                    "leverage_margin" => config.validation.leverage_margin = num(value)?,
                    "min_eigenvalue" => config.validation.min_eigenvalue = num(value)?,
                    other => return Err(format!("unknown key `{other}`")),
                }
                Ok(())
            })();
            parsed.map_err(err)?;
        }
        if !(config.alpha_level > 0.0 && config.alpha_level < 1.0) {
            return Err(CcivError::InvalidInput(format!(
                "alpha_level must lie in (0, 1), got {}",
                config.alpha_level
            )));
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variances {
    pub phi1: f64,
    pub phi2: f64,
    pub phi3: f64,
    pub psi: f64,
    pub phi1_pre: f64,
    pub phi2_pre: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub validation: String,
    pub lowdim_max_cluster_share: f64,
    pub num_clusters: usize,
    pub n: usize,
}

/// Everything in the pipeline that does not depend on `β₀`.
#[derive(Debug, Clone)]
pub struct InferenceFit {
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    pub beta_hat: f64,
    pub d_hat: f64,
    /// `Σ_{g≠h} Σ Xᵢ P_ij Yⱼ`
    pub score_y: f64,
    pub t_stat_ar: f64,
    pub variances: Variances,
    pub weights: CombinationWeights,
    pub alpha_level: f64,
    pub critical_value: f64,
    pub diagnostics: Diagnostics,
}

impl InferenceFit {
    pub fn fit(data: &ClusteredIVData, config: &InferenceConfig) -> Result<Self> {
        let critical_value = chi2_quantile(1.0 - config.alpha_level)?;
        let validation = if config.validate {
            validate_with(data, &config.validation).into_result()?.summary()
        } else {
            "skipped".to_string()
        };
        let design = partial_out(data)?;
        Self::from_design(&design, config, critical_value, validation)
    }

    fn from_design(
        design: &TransformedDesign,
        config: &InferenceConfig,
        critical_value: f64,
        validation: String,
    ) -> Result<Self> {
        let g = design.partition.num_clusters() as f64;
        let meat_scale = if config.small_sample_correction && g > 1.0 {
            g / (g - 1.0)
        } else {
            1.0
        };

        let gmm = gmm_beta1(design, config.weighting)?;
        let resid1 = &design.y - &design.x * gmm.beta1_hat;
        let phi1_pre = WaldComponents::new(design, &gmm, &resid1, meat_scale)?.phi1_hat;

        let (beta2_pre, d_pre) = crate::jackknife::jive_beta2(design)?;
        let resid2 = &design.y - &design.x * beta2_pre;
        let phi2_pre = variance_phi2(design, &resid2);

        let omega_hat = combine_weight(phi1_pre, phi2_pre, d_pre)?;
        let beta_hat = omega_hat * gmm.beta1_hat + (1.0 - omega_hat) * beta2_pre;
        let resid = &design.y - &design.x * beta_hat;

        let wald = WaldComponents::new(design, &gmm, &resid, meat_scale)?;
        let jack = JackknifeComponents::new(design, &resid)?;
        let phi2 = positive("Φ̂₂", jack.phi2_hat)?;
        let ar = jack.ar()?;

        let alphas = alpha_hats(wald.phi1_hat, phi2, jack.d_hat)?;
        let rhos = rho_hats_from_sums(
            rho1_numerator(design, &resid, &wald.x_acute, &jack.x_hat),
            jack.lm_ar_cross,
            wald.psi_hat,
            phi2,
            jack.phi3_hat,
            config.rho_margin,
        )?;
        let weights = CombinationWeights::new(omega_hat, alphas, rhos, config.eigen_floor)?;

        Ok(Self {
            beta1_hat: gmm.beta1_hat,
            beta2_hat: jack.beta2_hat,
            beta_hat,
            d_hat: jack.d_hat,
            score_y: jack.score_y,
            t_stat_ar: ar,
            variances: Variances {
                phi1: wald.phi1_hat,
                phi2,
                phi3: jack.phi3_hat,
                psi: wald.psi_hat,
                phi1_pre,
                phi2_pre,
            },
            weights,
            alpha_level: config.alpha_level,
            critical_value,
            diagnostics: Diagnostics {
                validation,
                lowdim_max_cluster_share: lowdim_max_cluster_share(&wald.x_acute, &design.partition),
                num_clusters: design.partition.num_clusters(),
                n: design.n(),
            },
        })
    }

    /// `T(β₀)`
    pub fn wald(&self, beta0: f64) -> f64 {
        (self.beta1_hat - beta0) / self.variances.phi1.sqrt()
    }

    /// `LM(β₀)`
    pub fn lm(&self, beta0: f64) -> f64 {
        (self.score_y - beta0 * self.d_hat) / self.variances.phi2.sqrt()
    }

    pub fn ar(&self) -> f64 {
        self.t_stat_ar
    }

    pub fn report(&self, beta0: f64) -> InferenceReport {
        let (t, lm, ar) = (self.wald(beta0), self.lm(beta0), self.ar());
        let test = combined_with_critical(t, lm, ar, &self.weights, self.critical_value);
        InferenceReport {
            beta0,
            beta1_hat: self.beta1_hat,
            beta2_hat: self.beta2_hat,
            beta_hat: self.beta_hat,
            d_hat: self.d_hat,
            t_stat: t,
            lm_stat: lm,
            ar_stat: ar,
            tilde_stats: test.tilde_stats,
            combined_stat: test.statistic,
            critical_value: self.critical_value,
            alpha_level: self.alpha_level,
            reject: test.reject,
            weights: self.weights.clone(),
            variances: self.variances,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Full pipeline for one null value. Errors (failed validation, degenerate
/// designs, nonpositive variances) come back as `Err`; callers running many
/// replications count them as invalid.
pub fn run_inference(data: &ClusteredIVData, beta0: f64, config: &InferenceConfig) -> Result<InferenceReport> {
    Ok(InferenceFit::fit(data, config)?.report(beta0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceReport {
    pub beta0: f64,
    pub beta1_hat: f64,
    pub beta2_hat: f64,
    pub beta_hat: f64,
    pub d_hat: f64,
    pub t_stat: f64,
    pub lm_stat: f64,
    pub ar_stat: f64,
    /// `R (T, LM, AR)`
    pub tilde_stats: [f64; 3],
    pub combined_stat: f64,
    pub critical_value: f64,
    pub alpha_level: f64,
    pub reject: bool,
    pub weights: CombinationWeights,
    pub variances: Variances,
    pub diagnostics: Diagnostics,
}

/// Column order of [`InferenceReport::csv_row`].
pub const REPORT_CSV_HEADER: &str = "beta0,beta1_hat,beta2_hat,beta_hat,T,LM,AR,T_tilde,LM_tilde,AR_tilde,\
combined_stat,critical_value,alpha,reject,omega_hat,alpha1_hat,alpha2_hat,rho1_hat,rho2_hat,rho_clamped,\
phi1_hat,phi2_hat,phi3_hat,psi_hat,phi1_pre,phi2_pre,d_hat,validation,lowdim_max_cluster_share";

impl InferenceReport {
    pub fn reject_wald(&self) -> bool {
        self.t_stat * self.t_stat >= self.critical_value
    }

    pub fn reject_lm(&self) -> bool {
        self.lm_stat * self.lm_stat >= self.critical_value
    }

    pub fn reject_ar(&self) -> bool {
        self.ar_stat * self.ar_stat >= self.critical_value
    }

    fn fields(&self) -> Vec<(&'static str, Field)> {
        use Field::*;
        let w = &self.weights;
        let v = &self.variances;
        vec![
            ("beta0", Num(self.beta0)),
            ("beta1_hat", Num(self.beta1_hat)),
            ("beta2_hat", Num(self.beta2_hat)),
            ("beta_hat", Num(self.beta_hat)),
            ("T", Num(self.t_stat)),
            ("LM", Num(self.lm_stat)),
            ("AR", Num(self.ar_stat)),
            ("T_tilde", Num(self.tilde_stats[0])),
            ("LM_tilde", Num(self.tilde_stats[1])),
            ("AR_tilde", Num(self.tilde_stats[2])),
            ("combined_stat", Num(self.combined_stat)),
            ("critical_value", Num(self.critical_value)),
            ("alpha", Num(self.alpha_level)),
            ("reject", Flag(self.reject)),
            ("omega_hat", Num(w.omega_hat)),
            ("alpha1_hat", Num(w.alpha1_hat)),
            ("alpha2_hat", Num(w.alpha2_hat)),
            ("rho1_hat", Num(w.rho1_hat)),
            ("rho2_hat", Num(w.rho2_hat)),
            ("rho_clamped", Flag(w.clamped)),
            ("phi1_hat", Num(v.phi1)),
            ("phi2_hat", Num(v.phi2)),
            ("phi3_hat", Num(v.phi3)),
            ("psi_hat", Num(v.psi)),
            ("phi1_pre", Num(v.phi1_pre)),
            ("phi2_pre", Num(v.phi2_pre)),
            ("d_hat", Num(self.d_hat)),
            ("validation", Text(self.diagnostics.validation.clone())),
            ("lowdim_max_cluster_share", Num(self.diagnostics.lowdim_max_cluster_share)),
        ]
    }

    /// One CSV row in [`REPORT_CSV_HEADER`] order, floats in shortest
    /// round-trip form.
    pub fn csv_row(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(_, f)| match f {
                Field::Num(v) => v.to_string(),
                Field::Flag(b) => b.to_string(),
                Field::Text(s) if s.contains(',') => format!("\"{s}\""),
                Field::Text(s) => s,
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

enum Field {
    Num(f64),
    Flag(bool),
    Text(String),
}

/// `key: value` lines, six decimals.
impl fmt::Display for InferenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (key, field) in self.fields() {
            match field {
                Field::Num(v) => writeln!(f, "{key}: {v:.6}")?,
                Field::Flag(b) => writeln!(f, "{key}: {b}")?,
                Field::Text(s) => writeln!(f, "{key}: {s}")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jackknife::variance_phi3;
    use crate::testutil::random_data;
    use nalgebra::{Matrix3, Vector3};

    fn weights(alphas: (f64, f64), rho1: f64, rho2: f64) -> CombinationWeights {
        let rhos = rho_hats_from_sums(rho1, rho2, 1.0, 1.0, 1.0, Some(DEFAULT_RHO_MARGIN)).unwrap();
        CombinationWeights::new(0.5, alphas, rhos, DEFAULT_EIGEN_FLOOR).unwrap()
    }

    #[test]
    fn omega_examples() {
        assert!((combine_weight(1.0, 4.0, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((combine_weight(4.0, 9.0, 3.0).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(combine_weight(1.0, 1e12, 1.0).unwrap() > 0.999);
        assert!(combine_weight(0.0, 1.0, 1.0).is_err());
        assert!(combine_weight(1.0, -1.0, 1.0).is_err());
        assert!(combine_weight(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn omega_decreases_in_phi1_pre() {
        let mut last = 1.0;
        for k in 1..20 {
            let w = combine_weight(k as f64 * 0.3, 2.0, 1.5).unwrap();
            assert!(w > 0.0 && w < last);
            last = w;
        }
    }

    #[test]
    fn alpha_examples() {
        let (a1, a2) = alpha_hats(2.0, 8.0, 2.0).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((a1 - h).abs() < 1e-15 && (a2 - h).abs() < 1e-15);
        let (a1, a2) = alpha_hats(3.0, 1.0, 1.0).unwrap();
        assert!((a1 - 0.5).abs() < 1e-15);
        assert!((a2 - 3f64.sqrt() / 2.0).abs() < 1e-15);
        let (a1, a2) = alpha_hats(1e-20, 1.0, 1.0).unwrap();
        assert!((a1 - 1.0).abs() < 1e-15 && a2 < 1e-9);
        assert!(alpha_hats(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rho_clamping_is_radial() {
        let r = rho_hats_from_sums(0.9, 0.9, 1.0, 1.0, 1.0, Some(1e-6)).unwrap();
        assert!(r.clamped);
        assert!((r.rho1 * r.rho1 + r.rho2 * r.rho2 - (1.0 - 1e-6)).abs() < 1e-14);
        assert!((r.rho1 - r.rho2).abs() < 1e-15);
        assert_eq!(r.raw, (0.9, 0.9));
        let free = rho_hats_from_sums(0.9, 0.9, 1.0, 1.0, 1.0, None).unwrap();
        assert!(!free.clamped);
        assert!(matches!(
            CombinationWeights::new(0.5, (1.0, 0.0), free, DEFAULT_EIGEN_FLOOR),
            Err(CcivError::IllConditioned { .. })
        ));
        let inside = rho_hats_from_sums(0.3, 0.4, 1.0, 1.0, 1.0, Some(1e-6)).unwrap();
        assert!(!inside.clamped);
        assert!(rho_hats_from_sums(0.3, 0.4, 0.0, 1.0, 1.0, None).is_err());
    }

    #[test]
    fn decoupled_pure_wald() {
        let w = weights((1.0, 0.0), 0.0, 0.0);
        let out = combined_test(1.7, -3.0, 2.0, &w, 0.05).unwrap();
        assert!((out.statistic - 1.7 * 1.7).abs() < 1e-14);
        let out = combined_test(2.0, 0.0, 0.0, &w, 0.05).unwrap();
        assert_eq!(out.reject, 4.0 >= out.critical_value);
    }

    #[test]
    fn decoupled_equal_weights() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let w = weights((h, h), 0.0, 0.0);
        let out = combined_test(1.2, 0.4, 5.0, &w, 0.05).unwrap();
        let expected = ((1.2_f64 + 0.4) / 2f64.sqrt()).powi(2);
        assert!((out.statistic - expected).abs() < 1e-14);
    }

    #[test]
    fn matches_dense_inverse() {
        // (aᵀM⁻¹s)² / (aᵀM⁻¹a) through an LU inverse.
        let w = weights((0.6, 0.8), 0.3, 0.4);
        let out = combined_test(2.0, 1.0, 0.5, &w, 0.05).unwrap();
        let m: Matrix3<f64> = Matrix3::new(1.0, 0.3, 0.0, 0.3, 1.0, 0.4, 0.0, 0.4, 1.0);
        let minv = m.lu().try_inverse().unwrap();
        let a: Vector3<f64> = Vector3::new(0.6, 0.8, 0.0);
        let s = Vector3::new(2.0, 1.0, 0.5);
        let expected = a.dot(&(minv * s)).powi(2) / a.dot(&(minv * a));
        assert!((out.statistic - expected).abs() < 1e-10 * expected);
    }

    #[test]
    fn sign_flip_leaves_decision_unchanged() {
        // Flipping the sign of X negates T and LM and the sign of ρ̂₂.
        let w = weights((0.6, 0.8), 0.3, 0.4);
        let flipped = weights((0.6, 0.8), 0.3, -0.4);
        for (t, lm, ar) in [(2.0, 1.0, 0.5), (-0.3, 1.9, -1.0), (0.1, 0.2, 3.0)] {
            let a = combined_test(t, lm, ar, &w, 0.05).unwrap();
            let b = combined_test(-t, -lm, ar, &flipped, 0.05).unwrap();
            assert!((a.statistic - b.statistic).abs() < 1e-12);
            assert_eq!(a.reject, b.reject);
        }
    }

    #[test]
    fn pipeline_runs_and_is_consistent() {
        let data = random_data(41, vec![3; 40], 2, 6);
        let config = InferenceConfig::default();
        let fit = InferenceFit::fit(&data, &config).unwrap();
        let w = &fit.weights;
        assert!(w.omega_hat > 0.0 && w.omega_hat < 1.0);
        assert!((w.alpha1_hat.powi(2) + w.alpha2_hat.powi(2) - 1.0).abs() < 1e-15);
        let r = fit.report(fit.beta1_hat);
        assert_eq!(r.t_stat, 0.0);
        assert_eq!(r.reject, r.combined_stat >= r.critical_value);
        assert!((r.critical_value - 3.841458820694124).abs() < 1e-12, "{}", r.critical_value);

        let design = partial_out(&data).unwrap();
        let resid = &design.y - &design.x * fit.beta_hat;
        assert!((variance_phi3(&design, &resid) - fit.variances.phi3).abs() < 1e-12 * fit.variances.phi3);
        let lm = crate::jackknife::lm_stat(&design, 0.1, fit.variances.phi2).unwrap();
        assert!((lm - fit.lm(0.1)).abs() < 1e-10 * lm.abs().max(1.0));

        let again = run_inference(&data, 0.1, &config).unwrap();
        assert_eq!(again, fit.report(0.1));
    }

    #[test]
    fn report_formats() {
        let data = random_data(42, vec![3; 30], 1, 5);
        let r = run_inference(&data, 0.25, &InferenceConfig::default()).unwrap();
        let text = r.to_string();
        assert!(text.contains(&format!("reject: {}\n", r.reject)));
        assert!(text.starts_with("beta0: 0.250000\n"));
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), REPORT_CSV_HEADER.split(',').count());
        let beta1: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(beta1, r.beta1_hat);
    }

    #[test]
    fn config_text() {
        let c = InferenceConfig::parse("alpha_level = 0.1\nweighting = gmm # optimal\nrho_margin = none\nmax_cluster_size = 9\n").unwrap();
        assert_eq!(c.alpha_level, 0.1);
        assert_eq!(c.weighting, Weighting::OptimalGmm);
        assert_eq!(c.rho_margin, None);
        assert_eq!(c.validation.max_cluster_size, 9);
        assert!(InferenceConfig::parse("alpha_level = 2").is_err());
        assert!(InferenceConfig::parse("colour = red").is_err());
    }

    #[test]
    fn failed_validation_is_error() {
        let data = random_data(43, vec![4; 6], 0, 3);
        let config = InferenceConfig {
            validation: ValidationOptions {
                max_cluster_size: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        assert!(matches!(run_inference(&data, 0.0, &config), Err(CcivError::Validation(_))));
    }
}
