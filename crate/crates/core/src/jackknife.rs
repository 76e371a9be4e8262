//! Leave-one-cluster-out estimator and the jackknife LM and AR statistics.
//!
//! Every quadruple sum `Σ_{g≠h} Σ_{i∈I_g} Σ_{j∈I_h} aᵢ B_ij bⱼ` is evaluated
//! either as `aᵀBb − Σ_g a_[g]ᵀ B_[g,g] b_[g]` or through the `G × G` matrix
//! of cluster-pair blocks `a_[g]ᵀ B_[g,h] b_[h]`, both `O(n²)`. The literal
//! loop versions live in [`crate::oracle`].

use nalgebra::{DMatrix, DVector};

use crate::data::{ClusterPartition, TransformedDesign};
use crate::error::{CcivError, Result};
use crate::linalg::SymMatrix;

/// `Σ_{g≠h} Σ_{i∈I_g} Σ_{j∈I_h} aᵢ B_ij bⱼ`.
pub fn offdiag_bilinear(
    a: &DVector<f64>,
    b_mat: &SymMatrix,
    b: &DVector<f64>,
    partition: &ClusterPartition,
) -> f64 {
    let full = a.dot(&(b_mat.as_matrix() * b));
    let own: f64 = partition
        .ranges()
        .map(|r| {
            let len = r.len();
            let block = b_mat.view((r.start, r.start), (len, len));
            a.rows_range(r.clone()).dot(&(block * b.rows_range(r)))
        })
        .sum();
    full - own
}

/// `G × G` matrix with entry `(g, h)` equal to `a_[g]ᵀ B_[g,h] b_[h]`.
pub fn cluster_pair_blocks(
    a: &DVector<f64>,
    b_mat: &SymMatrix,
    b: &DVector<f64>,
    partition: &ClusterPartition,
) -> DMatrix<f64> {
    let n = partition.n();
    let g_count = partition.num_clusters();
    // Row g of `left` is Σ_{i∈I_g} aᵢ B_i·.
    let mut left = DMatrix::zeros(g_count, n);
    for (g, r) in partition.ranges().enumerate() {
        for i in r {
            let ai = a[i];
            if ai != 0.0 {
                // B symmetric: column i is row i.
                let col = b_mat.column(i);
                for (dst, &v) in left.row_mut(g).iter_mut().zip(col.iter()) {
                    *dst += ai * v;
                }
            }
        }
    }
    let mut out = DMatrix::zeros(g_count, g_count);
    for (h, r) in partition.ranges().enumerate() {
        let bh = b.rows_range(r.clone());
        let cols = left.columns_range(r);
        out.set_column(h, &(cols * bh));
    }
    out
}

fn offdiag_sum(m: &DMatrix<f64>) -> f64 {
    m.sum() - m.diagonal().sum()
}

/// `β̂₂` and its denominator `D̂ = Σ_{g≠h} Σ Xᵢ P_ij Xⱼ`.
pub fn jive_beta2(design: &TransformedDesign) -> Result<(f64, f64)> {
    let d_hat = offdiag_bilinear(&design.x, &design.p, &design.x, &design.partition);
    let scale = design.x.norm_squared();
    if !(d_hat.abs() > 1e-12 * scale) {
        return Err(CcivError::WeakDesign(format!(
            "jackknife denominator {d_hat:e} is degenerate relative to ‖X‖² = {scale:e}"
        )));
    }
    let num = offdiag_bilinear(&design.x, &design.p, &design.y, &design.partition);
    Ok((num / d_hat, d_hat))
}

/// Cluster-robust variance of the jackknife score, with `Q − Q̄` weights and
/// the regressor taken before partialling out:
/// `Σ_g (Σ_{h≠g} X̃_[h]ᵀ Q_[h,g] ê_[g])² + Σ_{g≠h} (X̃_[g]ᵀ Q_[g,h] ê_[h])(ê_[g]ᵀ Q_[g,h] X̃_[h])`.
///
/// The second sum is not a square, so the result can be negative.
pub fn variance_phi2(design: &TransformedDesign, resid: &DVector<f64>) -> f64 {
    let blocks = cluster_pair_blocks(&design.x_tilde, &design.q, resid, &design.partition);
    phi2_from_blocks(&blocks)
}

fn phi2_from_blocks(blocks: &DMatrix<f64>) -> f64 {
    let g_count = blocks.nrows();
    let mut first = 0.0;
    let mut second = 0.0;
    for g in 0..g_count {
        let mut col = 0.0;
        for h in 0..g_count {
            if h != g {
                col += blocks[(h, g)];
                second += blocks[(g, h)] * blocks[(h, g)];
            }
        }
        first += col * col;
    }
    first + second
}

/// `2 Σ_{g≠h} (ê_[g]ᵀ P_[g,h] ê_[h])²`.
pub fn variance_phi3(design: &TransformedDesign, resid: &DVector<f64>) -> f64 {
    let blocks = cluster_pair_blocks(resid, &design.p, resid, &design.partition);
    phi3_from_blocks(&blocks)
}

fn phi3_from_blocks(blocks: &DMatrix<f64>) -> f64 {
    2.0 * (blocks.norm_squared() - blocks.diagonal().norm_squared())
}

/// Numerator of the jackknife LM statistic, `Σ_{g≠h} Σ Xᵢ P_ij eⱼ(β₀)`.
pub fn lm_numerator(design: &TransformedDesign, beta0: f64) -> f64 {
    let e0 = &design.y - &design.x * beta0;
    offdiag_bilinear(&design.x, &design.p, &e0, &design.partition)
}

/// `LM(β₀) = Σ_{g≠h} Σ Xᵢ P_ij eⱼ(β₀) / √Φ̂₂`.
pub fn lm_stat(design: &TransformedDesign, beta0: f64, phi2: f64) -> Result<f64> {
    if !(phi2 > 0.0) {
        return Err(CcivError::Variance(format!("Φ̂₂ = {phi2:e}")));
    }
    Ok(lm_numerator(design, beta0) / phi2.sqrt())
}

/// `AR = Σ_{g≠h} Σ êᵢ P_ij êⱼ / √Φ̂₃`.
pub fn ar_stat(design: &TransformedDesign, resid: &DVector<f64>, phi3: f64) -> Result<f64> {
    if !(phi3 > 0.0) {
        return Err(CcivError::Variance(format!("Φ̂₃ = {phi3:e}")));
    }
    Ok(offdiag_bilinear(resid, &design.p, resid, &design.partition) / phi3.sqrt())
}

/// Everything the combined test needs from the many-instrument side, for a
/// fixed residual vector `ê`.
#[derive(Debug, Clone)]
pub struct JackknifeComponents {
    pub beta2_hat: f64,
    pub d_hat: f64,
    /// `Σ_{g≠h} Σ Xᵢ P_ij Yⱼ`, so that the LM numerator is `score_y − β₀ D̂`.
    pub score_y: f64,
    pub phi2_hat: f64,
    pub phi3_hat: f64,
    /// `Σ_{g≠h} Σ êᵢ P_ij êⱼ`
    pub ar_numerator: f64,
    /// `X̂ = M_W (P − P̄) X`
    pub x_hat: DVector<f64>,
    /// `2 Σ_{g≠h} (X_[g]ᵀ P_[g,h] ê_[h])(ê_[g]ᵀ P_[g,h] ê_[h])`
    pub lm_ar_cross: f64,
}

impl JackknifeComponents {
    pub fn new(design: &TransformedDesign, resid: &DVector<f64>) -> Result<Self> {
        let (beta2_hat, d_hat) = jive_beta2(design)?;
        let p = &design.partition;
        let score_y = offdiag_bilinear(&design.x, &design.p, &design.y, p);
        let phi2_hat = variance_phi2(design, resid);
        let ee = cluster_pair_blocks(resid, &design.p, resid, p);
        let xe = cluster_pair_blocks(&design.x, &design.p, resid, p);
        let phi3_hat = phi3_from_blocks(&ee);
        let ar_numerator = offdiag_sum(&ee);
        let mut cross = 0.0;
        for g in 0..ee.nrows() {
            for h in 0..ee.ncols() {
                if g != h {
                    cross += xe[(g, h)] * ee[(g, h)];
                }
            }
        }
        let x_hat = design.q.as_matrix() * &design.x_tilde;
        Ok(Self {
            beta2_hat,
            d_hat,
            score_y,
            phi2_hat,
            phi3_hat,
            ar_numerator,
            x_hat,
            lm_ar_cross: 2.0 * cross,
        })
    }

    pub fn lm(&self, beta0: f64) -> Result<f64> {
        if !(self.phi2_hat > 0.0) {
            return Err(CcivError::Variance(format!("Φ̂₂ = {:e}", self.phi2_hat)));
        }
        Ok((self.score_y - beta0 * self.d_hat) / self.phi2_hat.sqrt())
    }

    pub fn ar(&self) -> Result<f64> {
        if !(self.phi3_hat > 0.0) {
            return Err(CcivError::Variance(format!("Φ̂₃ = {:e}", self.phi3_hat)));
        }
        Ok(self.ar_numerator / self.phi3_hat.sqrt())
    }
}
