use std::fmt;

use nalgebra::DMatrix;

use super::ClusteredIVData;
use crate::error::{CcivError, Result};
use crate::linalg::{extreme_eigenvalues, orthonormal_basis, SymMatrix, MAX_CONDITION};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationOptions {
    /// Largest cluster accepted by the bounded-cluster-size check.
    pub max_cluster_size: usize,
    /// Required gap below one for `λ_max(P_[g,g])`.
    pub leverage_margin: f64,
    /// Smallest acceptable eigenvalue of the scaled second-moment matrices.
    pub min_eigenvalue: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            max_cluster_size: 500,
            leverage_margin: 1e-6,
            min_eigenvalue: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Headline number for the check (size, eigenvalue or condition number).
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ValidationCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// `"pass"` or a comma-separated list of failed check names.
    pub fn summary(&self) -> String {
        let failed: Vec<&str> = self.failures().map(|c| c.name).collect();
        if failed.is_empty() {
            "pass".into()
        } else {
            format!("fail({})", failed.join(","))
        }
    }

    /// Turns a failed report into a `Validation` error.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(CcivError::Validation(
                self.failures()
                    .map(|c| format!("{}: {}", c.name, c.detail))
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<22} {:<4} {:>14.6e}  {}",
                c.name,
                if c.passed { "ok" } else { "FAIL" },
                c.value,
                c.detail
            )?;
        }
        Ok(())
    }
}

pub fn validate(data: &ClusteredIVData) -> ValidationReport {
    validate_with(data, &ValidationOptions::default())
}

/// Report-only checks of the regularity conditions: bounded clusters,
/// nondegenerate second moments, full-rank many instruments and cluster
/// leverage bounded away from one.
pub fn validate_with(data: &ClusteredIVData, opts: &ValidationOptions) -> ValidationReport {
    let n = data.n();
    let mut checks = Vec::new();

    let max_size = data.partition().max_size();
    checks.push(ValidationCheck {
        name: "cluster_size_bound",
        passed: max_size <= opts.max_cluster_size,
        value: max_size as f64,
        detail: format!("largest cluster {max_size}, bound {}", opts.max_cluster_size),
    });

    let control_basis = orthonormal_basis(data.controls()).ok().map(|(q, _)| q);
    let residualize = |m: &DMatrix<f64>| match &control_basis {
        Some(u) if u.ncols() > 0 => m - u * u.tr_mul(m),
        _ => m.clone(),
    };
    let lowdim = residualize(data.lowdim_iv());
    let many = residualize(data.many_iv());

    checks.push(moment_check("lowdim_iv_moments", &lowdim, n, opts));
    if data.num_controls() > 0 {
        checks.push(moment_check("control_moments", data.controls(), n, opts));
    }

    let k = data.num_many_iv();
    let rank_ok = k < n;
    let many_cond = gram_condition(&many);
    let (rank_passed, basis) = if rank_ok && many_cond <= MAX_CONDITION {
        (true, orthonormal_basis(&many).ok().map(|(q, _)| q))
    } else {
        (false, None)
    };
    checks.push(ValidationCheck {
        name: "many_iv_rank",
        passed: rank_passed && basis.is_some(),
        value: many_cond,
        detail: format!("K = {k}, n = {n}, cond(ZᵀZ) = {many_cond:.3e}"),
    });

    match basis {
        Some(basis) => {
            let mut worst = 0.0_f64;
            let mut worst_g = 0;
            for (g, r) in data.partition().ranges().enumerate() {
                let rows = basis.rows_range(r);
                let block = SymMatrix::mirror_lower(&rows * rows.transpose());
                let lmax = extreme_eigenvalues(&block).map(|(hi, _)| hi).unwrap_or(f64::INFINITY);
                if lmax > worst {
                    worst = lmax;
                    worst_g = g;
                }
            }
            checks.push(ValidationCheck {
                name: "block_leverage",
                passed: worst < 1.0 - opts.leverage_margin,
                value: worst,
                detail: format!(
                    "max λ_max(P_[g,g]) = {worst:.6} in cluster {}",
                    data.labels()[worst_g]
                ),
            });
        }
        None => checks.push(ValidationCheck {
            name: "block_leverage",
            passed: false,
            value: f64::NAN,
            detail: "not computable without a full-rank instrument matrix".into(),
        }),
    }

    for (name, m) in [
        ("cond_controls", data.controls()),
        ("cond_many_iv", &many),
        ("cond_lowdim_iv", &lowdim),
    ] {
        if m.ncols() == 0 {
            continue;
        }
        let cond = gram_condition(m);
        checks.push(ValidationCheck {
            name,
            passed: cond <= MAX_CONDITION,
            value: cond,
            detail: format!("condition number {cond:.3e}, limit {MAX_CONDITION:e}"),
        });
    }

    ValidationReport { checks }
}

fn gram_condition(m: &DMatrix<f64>) -> f64 {
    let gram = SymMatrix::mirror_lower(m.tr_mul(m));
    match extreme_eigenvalues(&gram) {
        Ok((hi, lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

fn moment_check(name: &'static str, m: &DMatrix<f64>, n: usize, opts: &ValidationOptions) -> ValidationCheck {
    let gram = SymMatrix::mirror_lower(m.tr_mul(m) / n as f64);
    let (hi, lo) = extreme_eigenvalues(&gram).unwrap_or((f64::NAN, f64::NAN));
    ValidationCheck {
        name,
        passed: lo > opts.min_eigenvalue && hi.is_finite(),
        value: lo,
        detail: format!("eigenvalues of (1/n)Σ vvᵀ in [{lo:.3e}, {hi:.3e}]"),
    }
}
