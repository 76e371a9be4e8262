use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{DGPConfig, LowDimMode};
use crate::data::{ClusterPartition, ClusteredIVData};
use crate::error::{CcivError, Result};

/// Cluster sizes summing to `n`: every cluster gets one observation and the
/// remaining `n − G` are split in proportion to `g^γ` (`g = 1..G`) by the
/// largest-remainder rule, ties going to the larger `g`. The result is
/// nondecreasing in `g`.
pub fn gen_cluster_sizes(n: usize, clusters: usize, gamma_dmn: f64) -> Result<Vec<usize>> {
    if clusters == 0 || clusters > n {
        return Err(CcivError::InvalidInput(format!(
            "cannot split n = {n} observations into {clusters} nonempty clusters"
        )));
    }
    let extra = (n - clusters) as f64;
    let weights: Vec<f64> = (1..=clusters).map(|g| (g as f64).powf(gamma_dmn)).collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| extra * w / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| 1 + q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..clusters).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(b.cmp(&a))
    });
    for &g in order.iter().take(n - assigned) {
        sizes[g] += 1;
    }
    Ok(sizes)
}

/// Population objects the simulator knows and the estimators do not.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    /// First-stage signal after within-cluster demeaning.
    pub pi: DVector<f64>,
    pub beta: f64,
    /// First-stage coefficients on the many instruments.
    pub pi_coef: DVector<f64>,
}

/// `π_k = φ^(k−1)` (with `0⁰ = 1`) scaled to `‖π‖ = √(ψ √K / n)`.
pub fn first_stage_coefficients(config: &DGPConfig) -> DVector<f64> {
    let k = config.num_many_iv;
    let mut pi = DVector::from_fn(k, |j, _| if j == 0 { 1.0 } else { config.phi.powi(j as i32) });
    let target = (config.psi * (k as f64).sqrt() / config.n as f64).sqrt();
    pi *= target / pi.norm();
    pi
}

fn rng_for(seed: u64, rep_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep_index);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Column of `n` draws with within-cluster equicorrelation `θ₁`.
fn equicorrelated(rng: &mut ChaCha8Rng, partition: &ClusterPartition, theta1: f64) -> DVector<f64> {
    let (a, b) = (theta1.sqrt(), (1.0 - theta1).sqrt());
    let mut out = DVector::zeros(partition.n());
    for r in partition.ranges() {
        let common = normal(rng);
        for i in r {
            out[i] = a * common + b * normal(rng);
        }
    }
    out
}

fn demean(v: &mut [f64], partition: &ClusterPartition) {
    for r in partition.ranges() {
        let mean = v[r.clone()].iter().sum::<f64>() / r.len() as f64;
        for x in &mut v[r] {
            *x -= mean;
        }
    }
}

fn demean_vec(mut v: DVector<f64>, partition: &ClusterPartition) -> DVector<f64> {
    demean(v.as_mut_slice(), partition);
    v
}

fn demean_mat(mut m: DMatrix<f64>, partition: &ClusterPartition) -> DMatrix<f64> {
    for mut col in m.column_iter_mut() {
        demean(col.as_mut_slice(), partition);
    }
    m
}

/// `e_[g] ← Ω₂ e_[g]` with `(Ω₂)_ts = θ₂^(t−s)` for `s ≤ t`.
fn filter_errors(v: &DVector<f64>, partition: &ClusterPartition, theta2: f64) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for r in partition.ranges() {
        let start = r.start;
        for t in r.clone() {
            let mut acc = 0.0;
            let mut w = 1.0;
            for s in (start..=t).rev() {
                acc += w * v[s];
                w *= theta2;
            }
            out[t] = acc;
        }
    }
    out
}

/// Draws before within-cluster demeaning.
struct RawDraws {
    partition: ClusterPartition,
    y: DVector<f64>,
    x: DVector<f64>,
    w: DMatrix<f64>,
    z: DMatrix<f64>,
    lowdim: DMatrix<f64>,
    signal: DVector<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    e: DVector<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    v: DVector<f64>,
    pi_coef: DVector<f64>,
}

fn draw(config: &DGPConfig, rep_index: u64) -> Result<RawDraws> {
    config.validate()?;
    let sizes = gen_cluster_sizes(config.n, config.clusters, config.gamma_dmn)?;
    let partition = ClusterPartition::new(sizes)?;
    let (n, k, dw, g_count) = (config.n, config.num_many_iv, config.num_controls, config.clusters);
    let membership = partition.membership();
    let mut rng = rng_for(config.seed, rep_index);

    let g_scale = g_count as f64;
    let alpha_fe: Vec<f64> = (1..=g_count).map(|g| normal(&mut rng) + g as f64 / g_scale).collect();
    let xi_fe: Vec<f64> = (1..=g_count).map(|g| normal(&mut rng) + g as f64 / g_scale).collect();

    let w = DMatrix::from_fn(n, dw, |_, _| normal(&mut rng));
    let mut z = DMatrix::zeros(n, k);
    for j in 0..k {
        z.set_column(j, &equicorrelated(&mut rng, &partition, config.theta1));
    }
    let extra = match config.lowdim_mode {
        LowDimMode::Mean => None,
        LowDimMode::Injected => Some(equicorrelated(&mut rng, &partition, config.theta1)),
    };

    let eps = DVector::from_fn(n, |_, _| normal(&mut rng));
    let eta = DVector::from_fn(n, |_, _| normal(&mut rng));
    let v_e: Vec<f64> = (0..g_count).map(|_| normal(&mut rng)).collect();
    let v_v: Vec<f64> = if config.common_shock {
        v_e.clone()
    } else {
        (0..g_count).map(|_| normal(&mut rng)).collect()
    };

    let coef = if dw > 0 { 1.0 / (dw as f64).sqrt() } else { 0.0 };
    let w_delta = DVector::from_fn(n, |i, _| coef * w.row(i).sum());
    let sigma = DVector::from_fn(n, |i, _| {
        if config.heteroskedastic {
            ((0.2 + w_delta[i] * w_delta[i]) / 2.4).sqrt()
        } else {
            0.5_f64.sqrt()
        }
    });
    let mix = (1.0 - config.rho * config.rho).sqrt();
    let e_raw = DVector::from_fn(n, |i, _| config.rho * eps[i] + mix * sigma[i] * v_e[membership[i]]);
    let v_raw = DVector::from_fn(n, |i, _| config.rho * eta[i] + mix * sigma[i] * v_v[membership[i]]);
    let e = filter_errors(&e_raw, &partition, config.theta2);
    let v = filter_errors(&v_raw, &partition, config.theta2);

    let pi_coef = first_stage_coefficients(config);
    let mut signal = &z * &pi_coef;
    if let Some(s) = &extra {
        let kappa = (config.lowdim_strength * (k as f64).sqrt() / n as f64).sqrt();
        signal += s * kappa;
    }
    // γ = δ, so Wγ = Wδ.
    let x = DVector::from_fn(n, |i, _| signal[i] + w_delta[i] + xi_fe[membership[i]] + v[i]);
    let y = DVector::from_fn(n, |i, _| {
        x[i] * config.beta_true + w_delta[i] + alpha_fe[membership[i]] + e[i]
    });
    let lowdim = match config.lowdim_mode {
        LowDimMode::Mean => DMatrix::from_fn(n, 1, |i, _| z.row(i).mean()),
        LowDimMode::Injected => DMatrix::from_column_slice(n, 1, signal.as_slice()),
    };
    Ok(RawDraws {
        partition,
        y,
        x,
        w,
        z,
        lowdim,
        signal,
        e,
        v,
        pi_coef,
    })
}

/// One replication of the panel design, demeaned within clusters. The random
/// stream depends only on `(seed, rep_index)`.
pub fn gen_dataset(config: &DGPConfig, rep_index: u64) -> Result<(ClusteredIVData, Truth)> {
    let raw = draw(config, rep_index)?;
    let p = &raw.partition;
    let data = ClusteredIVData::new(
        demean_vec(raw.y, p),
        demean_vec(raw.x, p),
        demean_mat(raw.w, p),
        demean_mat(raw.z, p),
        demean_mat(raw.lowdim, p),
        p.clone(),
    )?;
    let truth = Truth {
        pi: demean_vec(raw.signal, p),
        beta: config.beta_true,
        pi_coef: raw.pi_coef,
    };
    Ok((data, truth))
}
