//! Brute-force references for the fast paths, and a Monte Carlo simulation
//! of the trivariate normal limit experiment.
//!
//! Everything here is deliberately literal: nested loops over clusters and
//! observations, explicit small-matrix inverses, no shared helpers with the
//! production code.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{ClusterPartition, TransformedDesign};
use crate::error::{CcivError, Result};
use crate::linalg::chi2_quantile;
use crate::wald::Weighting;

/// Largest `n` the loop references accept.
pub const NAIVE_MAX_N: usize = 200;

fn guard(n: usize) -> Result<()> {
    if n > NAIVE_MAX_N {
        return Err(CcivError::InvalidInput(format!(
            "naive reference limited to n <= {NAIVE_MAX_N}, got {n}"
        )));
    }
    Ok(())
}

fn clusters(partition: &ClusterPartition) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for &s in partition.sizes() {
        out.push((start..start + s).collect());
        start += s;
    }
    out
}

/// `Σ_{g≠h} Σ_{i∈I_g} Σ_{j∈I_h} aᵢ B_ij bⱼ` by four nested loops.
pub fn naive_offdiag_bilinear(
    a: &DVector<f64>,
    b_mat: &DMatrix<f64>,
    b: &DVector<f64>,
    partition: &ClusterPartition,
) -> Result<f64> {
    guard(partition.n())?;
    let cl = clusters(partition);
    let mut total = 0.0;
    for (g, ig) in cl.iter().enumerate() {
        for (h, ih) in cl.iter().enumerate() {
            if g == h {
                continue;
            }
            for &i in ig {
                for &j in ih {
                    total += a[i] * b_mat[(i, j)] * b[j];
                }
            }
        }
    }
    Ok(total)
}

/// `Σ_{i∈I_g} Σ_{j∈I_h} aᵢ B_ij bⱼ`
fn block_sum(a: &DVector<f64>, b_mat: &DMatrix<f64>, b: &DVector<f64>, ig: &[usize], ih: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in ig {
        for &j in ih {
            s += a[i] * b_mat[(i, j)] * b[j];
        }
    }
    s
}

/// `M_W (P − P̄) M_W` by explicit triple products.
pub fn naive_q(design: &TransformedDesign) -> Result<DMatrix<f64>> {
    let n = design.n();
    guard(n)?;
    let membership = design.partition.membership();
    let m = design.m_w.as_matrix();
    let p = design.p.as_matrix();
    let mut diff = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if membership[i] != membership[j] {
                diff[(i, j)] = p[(i, j)];
            }
        }
    }
    let mut left = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += m[(i, k)] * diff[(k, j)];
            }
            left[(i, j)] = s;
        }
    }
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += left[(i, k)] * m[(k, j)];
            }
            q[(i, j)] = s;
        }
    }
    Ok(q)
}

/// `(β̂₂, D̂)`
pub fn naive_beta2(design: &TransformedDesign) -> Result<(f64, f64)> {
    let p = design.p.as_matrix();
    let d = naive_offdiag_bilinear(&design.x, p, &design.x, &design.partition)?;
    let num = naive_offdiag_bilinear(&design.x, p, &design.y, &design.partition)?;
    Ok((num / d, d))
}

pub fn naive_lm_numerator(design: &TransformedDesign, beta0: f64) -> Result<f64> {
    let e0 = DVector::from_fn(design.n(), |i, _| design.y[i] - design.x[i] * beta0);
    naive_offdiag_bilinear(&design.x, design.p.as_matrix(), &e0, &design.partition)
}

pub fn naive_ar_numerator(design: &TransformedDesign, resid: &DVector<f64>) -> Result<f64> {
    naive_offdiag_bilinear(resid, design.p.as_matrix(), resid, &design.partition)
}

/// `Σ_g (Σ_{h≠g} Σ_{j∈I_h} Σ_{i∈I_g} X̃ⱼ Q_ji êᵢ)² + Σ_{g≠h} (Σ X̃ᵢ Q_ij êⱼ)(Σ X̃ⱼ Q_ji êᵢ)`
pub fn naive_phi2(design: &TransformedDesign, resid: &DVector<f64>) -> Result<f64> {
    let q = naive_q(design)?;
    let xt = &design.x_tilde;
    let cl = clusters(&design.partition);
    let mut first = 0.0;
    for (g, ig) in cl.iter().enumerate() {
        let mut inner = 0.0;
        for (h, ih) in cl.iter().enumerate() {
            if h != g {
                inner += block_sum(xt, &q, resid, ih, ig);
            }
        }
        first += inner * inner;
    }
    let mut second = 0.0;
    for (g, ig) in cl.iter().enumerate() {
        for (h, ih) in cl.iter().enumerate() {
            if g != h {
                let mut ab = 0.0;
                let mut ba = 0.0;
                for &i in ig {
                    for &j in ih {
                        ab += xt[i] * q[(i, j)] * resid[j];
                        ba += xt[j] * q[(j, i)] * resid[i];
                    }
                }
                second += ab * ba;
            }
        }
    }
    Ok(first + second)
}

/// `2 Σ_{g≠h} (Σ_{i∈I_g} Σ_{j∈I_h} êᵢ P_ij êⱼ)²`
pub fn naive_phi3(design: &TransformedDesign, resid: &DVector<f64>) -> Result<f64> {
    guard(design.n())?;
    let p = design.p.as_matrix();
    let cl = clusters(&design.partition);
    let mut total = 0.0;
    for (g, ig) in cl.iter().enumerate() {
        for (h, ih) in cl.iter().enumerate() {
            if g != h {
                let s = block_sum(resid, p, resid, ig, ih);
                total += s * s;
            }
        }
    }
    Ok(2.0 * total)
}

/// Gauss–Jordan inverse with partial pivoting.
fn gauss_jordan_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    let mut a = m.clone();
    let mut inv = DMatrix::identity(d, d);
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&r, &s| a[(r, col)].abs().total_cmp(&a[(s, col)].abs()))
            .unwrap();
        if a[(pivot, col)] == 0.0 {
            return Err(CcivError::NumericalFailure("singular matrix in reference inverse".into()));
        }
        a.swap_rows(col, pivot);
        inv.swap_rows(col, pivot);
        let scale = a[(col, col)];
        for k in 0..d {
            a[(col, k)] /= scale;
            inv[(col, k)] /= scale;
        }
        for r in 0..d {
            if r != col {
                let f = a[(r, col)];
                for k in 0..d {
                    a[(r, k)] -= f * a[(col, k)];
                    inv[(r, k)] -= f * inv[(col, k)];
                }
            }
        }
    }
    Ok(inv)
}

fn naive_cluster_meat(design: &TransformedDesign, resid: &DVector<f64>) -> DMatrix<f64> {
    let z = &design.lowdim_iv;
    let d = z.ncols();
    let mut omega = DMatrix::zeros(d, d);
    for ig in clusters(&design.partition) {
        for a in 0..d {
            for b in 0..d {
                let mut sa = 0.0;
                let mut sb = 0.0;
                for &i in &ig {
                    sa += z[(i, a)] * resid[i];
                    sb += z[(i, b)] * resid[i];
                }
                omega[(a, b)] += sa * sb;
            }
        }
    }
    omega
}

/// `zÂzᵀX` computed entry by entry.
fn naive_x_acute(design: &TransformedDesign, a_hat: &DMatrix<f64>) -> DVector<f64> {
    let z = &design.lowdim_iv;
    let (n, d) = (z.nrows(), z.ncols());
    let mut zx = vec![0.0; d];
    for (k, v) in zx.iter_mut().enumerate() {
        for i in 0..n {
            *v += z[(i, k)] * design.x[i];
        }
    }
    DVector::from_fn(n, |i, _| {
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += z[(i, a)] * a_hat[(a, b)] * zx[b];
            }
        }
        s
    })
}

/// `Â` for the requested weighting, rebuilt from scratch.
pub fn naive_weight_matrix(design: &TransformedDesign, weighting: Weighting) -> Result<DMatrix<f64>> {
    guard(design.n())?;
    let z = &design.lowdim_iv;
    let (n, d) = (z.nrows(), z.ncols());
    let mut ztz = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            for i in 0..n {
                ztz[(a, b)] += z[(i, a)] * z[(i, b)];
            }
        }
    }
    let tsls = gauss_jordan_inverse(&ztz)?;
    match weighting {
        Weighting::Tsls => Ok(tsls),
        Weighting::OptimalGmm => {
            let xa = naive_x_acute(design, &tsls);
            let beta = (0..n).map(|i| xa[i] * design.y[i]).sum::<f64>()
                / (0..n).map(|i| xa[i] * design.x[i]).sum::<f64>();
            let resid = DVector::from_fn(n, |i, _| design.y[i] - design.x[i] * beta);
            gauss_jordan_inverse(&naive_cluster_meat(design, &resid))
        }
    }
}

/// `(ρ̂₁, ρ̂₂)` before any clamping.
pub fn naive_rho(design: &TransformedDesign, resid: &DVector<f64>, weighting: Weighting) -> Result<(f64, f64)> {
    let n = design.n();
    let a_hat = naive_weight_matrix(design, weighting)?;
    let x_acute = naive_x_acute(design, &a_hat);
    let q = naive_q(design)?;
    let x_hat: DVector<f64> = DVector::from_fn(n, |i, _| (0..n).map(|j| q[(i, j)] * design.x_tilde[j]).sum::<f64>());
    let cl = clusters(&design.partition);

    let mut psi = 0.0;
    let mut num1 = 0.0;
    for ig in &cl {
        let mut sa = 0.0;
        let mut sh = 0.0;
        for &i in ig {
            sa += x_acute[i] * resid[i];
            sh += x_hat[i] * resid[i];
        }
        psi += sa * sa;
        num1 += sa * sh;
    }

    let p = design.p.as_matrix();
    let mut num2 = 0.0;
    for (g, ig) in cl.iter().enumerate() {
        for (h, ih) in cl.iter().enumerate() {
            if g != h {
                num2 += block_sum(&design.x, p, resid, ig, ih) * block_sum(resid, p, resid, ig, ih);
            }
        }
    }
    let phi2 = naive_phi2(design, resid)?;
    let phi3 = naive_phi3(design, resid)?;
    if !(psi > 0.0 && phi2 > 0.0 && phi3 > 0.0) {
        return Err(CcivError::Variance(format!(
            "reference variances Ψ̂ = {psi:e}, Φ̂₂ = {phi2:e}, Φ̂₃ = {phi3:e}"
        )));
    }
    Ok((num1 / (psi * phi2).sqrt(), 2.0 * num2 / (phi2 * phi3).sqrt()))
}

/// Inverse of `[[1, ρ₁, 0], [ρ₁, 1, ρ₂], [0, ρ₂, 1]]` by cofactors.
fn correlation_inverse(rho1: f64, rho2: f64) -> [[f64; 3]; 3] {
    let det = 1.0 - rho1 * rho1 - rho2 * rho2;
    [
        [(1.0 - rho2 * rho2) / det, -rho1 / det, rho1 * rho2 / det],
        [-rho1 / det, 1.0 / det, -rho2 / det],
        [rho1 * rho2 / det, -rho2 / det, (1.0 - rho1 * rho1) / det],
    ]
}

/// Combined statistic written as `(aᵀM⁻¹s)² / (aᵀM⁻¹a)` with `a = (α₁, α₂, 0)`.
pub fn naive_combined_statistic(alphas: (f64, f64), rho1: f64, rho2: f64, stats: [f64; 3]) -> f64 {
    let minv = correlation_inverse(rho1, rho2);
    let a = [alphas.0, alphas.1, 0.0];
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            num += a[i] * minv[i][j] * stats[j];
            den += a[i] * minv[i][j] * a[j];
        }
    }
    num * num / den
}

/// Parameters of the trivariate normal limit experiment: `(𝒩₁, 𝒩₂, 𝒩₃)`
/// has mean `(a₁δ, a₂δ, 0)` and the `(ρ₁, ρ₂)` correlation pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitExperimentSpec {
    pub a1: f64,
    pub a2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub deltas: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub alpha_level: f64,
}

impl Default for LimitExperimentSpec {
    fn default() -> Self {
        Self {
            a1: 1.0,
            a2: 1.0,
            rho1: 0.5,
            rho2: 0.0,
            deltas: vec![-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0],
            replications: 100_000,
            seed: 20_240_601,
            alpha_level: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComparisonRow {
    pub delta: f64,
    pub ump: f64,
    pub wald: f64,
    pub lm: f64,
    /// Largest `√(p(1−p)/R)` over the three rates.
    pub mc_std_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub replications: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub const HEADER: &'static str = "delta,ump,wald,lm,mc_std_err";

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.delta, r.ump, r.wald, r.lm, r.mc_std_err)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }
}

const CHUNK: usize = 4096;

/// Rejection rates of the optimal combination, `𝒩₁²` alone and `𝒩₂²` alone.
/// The same normal draws are reused for every `δ`.
pub fn mc_limit_experiment(spec: &LimitExperimentSpec) -> Result<ComparisonTable> {
    let (r1, r2) = (spec.rho1, spec.rho2);
    if !(r1 * r1 + r2 * r2 < 1.0) {
        return Err(CcivError::InvalidInput(format!(
            "need rho1² + rho2² < 1, got ({r1}, {r2})"
        )));
    }
    if spec.replications == 0 || spec.deltas.is_empty() {
        return Err(CcivError::InvalidInput("need at least one replication and one delta".into()));
    }
    if !(spec.a1 >= 0.0 && spec.a2 >= 0.0 && spec.a1 + spec.a2 > 0.0) {
        return Err(CcivError::InvalidInput("a1, a2 must be nonnegative and not both zero".into()));
    }
    let crit = chi2_quantile(1.0 - spec.alpha_level)?;

    // Cholesky factor of [[1,ρ₁,0],[ρ₁,1,ρ₂],[0,ρ₂,1]] in closed form:
    //   L = [[1, 0, 0],
    //        [ρ₁, s, 0],
    //        [0, ρ₂/s, √(1 − ρ₁² − ρ₂²)/s]],  s = √(1 − ρ₁²).
    let s = (1.0 - r1 * r1).sqrt();
    let l21 = r1;
    let l22 = s;
    let l32 = r2 / s;
    let l33 = (1.0 - r1 * r1 - r2 * r2).sqrt() / s;

    let norm = (spec.a1 * spec.a1 + spec.a2 * spec.a2).sqrt();
    let alphas = (spec.a1 / norm, spec.a2 / norm);
    let minv = correlation_inverse(r1, r2);
    // w = M⁻¹a, so the optimal statistic is (wᵀ𝒩)² / (wᵀa).
    let a = [alphas.0, alphas.1, 0.0];
    let w: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| minv[i][j] * a[j]).sum());
    let wa: f64 = (0..3).map(|i| w[i] * a[i]).sum();

    let num_chunks = spec.replications.div_ceil(CHUNK);
    let nd = spec.deltas.len();
    let counts: Vec<Vec<[u64; 3]>> = (0..num_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(c as u64);
            let len = CHUNK.min(spec.replications - c * CHUNK);
            let mut local = vec![[0u64; 3]; nd];
            for _ in 0..len {
                let e1: f64 = StandardNormal.sample(&mut rng);
                let e2: f64 = StandardNormal.sample(&mut rng);
                let e3: f64 = StandardNormal.sample(&mut rng);
                let n1 = e1;
                let n2 = l21 * e1 + l22 * e2;
                let n3 = l32 * e2 + l33 * e3;
                for (k, &delta) in spec.deltas.iter().enumerate() {
                    let m1 = n1 + spec.a1 * delta;
                    let m2 = n2 + spec.a2 * delta;
                    let lin = w[0] * m1 + w[1] * m2 + w[2] * n3;
                    let hits = &mut local[k];
                    hits[0] += (lin * lin / wa >= crit) as u64;
                    hits[1] += (m1 * m1 >= crit) as u64;
                    hits[2] += (m2 * m2 >= crit) as u64;
                }
            }
            local
        })
        .collect();

    let reps = spec.replications as f64;
    let rows = spec
        .deltas
        .iter()
        .enumerate()
        .map(|(k, &delta)| {
            let mut total = [0u64; 3];
            for chunk in &counts {
                for t in 0..3 {
                    total[t] += chunk[k][t];
                }
            }
            let rates = total.map(|c| c as f64 / reps);
            let se = rates
                .iter()
                .map(|p| (p * (1.0 - p) / reps).sqrt())
                .fold(0.0, f64::max);
            ComparisonRow {
                delta,
                ump: rates[0],
                wald: rates[1],
                lm: rates[2],
                mc_std_err: se,
            }
        })
        .collect();
    Ok(ComparisonTable {
        replications: spec.replications,
        rows,
    })
}
