//! Monte Carlo engine for the linear panel IV design: data generation,
//! rejection-rate tables over a grid of null values and chart output.

mod config;
mod dgp;
mod svg;

use std::io::Write;

use rayon::prelude::*;

pub use config::{centered_grid, DGPConfig, LowDimMode, GRID_OFFSETS, PRESETS};
pub use dgp::{first_stage_coefficients, gen_cluster_sizes, gen_dataset, Truth};
pub use svg::power_svg;

use crate::combiner::{InferenceConfig, InferenceFit};
use crate::error::{CcivError, Result};

/// Rejection decisions of one replication at each grid point, in the order
/// Wald, LM, AR, combined. `None` marks an invalid replication.
pub type Decisions = Option<Vec<[bool; 4]>>;

pub fn inference_config(config: &DGPConfig) -> InferenceConfig {
    InferenceConfig {
        alpha_level: config.alpha_level,
        weighting: config.weighting,
        ..InferenceConfig::default()
    }
}

/// Runs the full pipeline on replication `rep_index`.
pub fn fit_replication(config: &DGPConfig, rep_index: u64) -> Result<InferenceFit> {
    let (data, _) = gen_dataset(config, rep_index)?;
    InferenceFit::fit(&data, &inference_config(config))
}

pub fn replicate(config: &DGPConfig, rep_index: u64) -> Decisions {
    let fit = fit_replication(config, rep_index).ok()?;
    Some(
        config
            .beta0_grid
            .iter()
            .map(|&b| {
                let r = fit.report(b);
                [r.reject_wald(), r.reject_lm(), r.reject_ar(), r.reject]
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerRow {
    pub beta0: f64,
    pub wald: f64,
    pub lm: f64,
    pub ar: f64,
    pub combined: f64,
    /// Largest `√(p(1−p)/R)` over the four rates, `R` the valid count.
    pub mc_std_err: f64,
    pub valid: usize,
    pub invalid_count: usize,
}

impl PowerRow {
    /// `√(p(1−p)/R)` for one of this row's rates.
    pub fn std_err(&self, rate: f64) -> f64 {
        if self.valid == 0 {
            return f64::NAN;
        }
        (rate * (1.0 - rate) / self.valid as f64).sqrt()
    }

    pub fn rates(&self) -> [f64; 4] {
        [self.wald, self.lm, self.ar, self.combined]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerTable {
    pub beta_true: f64,
    pub alpha_level: f64,
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    pub const HEADER: &'static str = "beta0,wald,lm,ar,combined,mc_std_err,valid,invalid_count";

    /// Aggregates per-replication decisions, skipping invalid replications.
    pub fn from_decisions(config: &DGPConfig, decisions: &[Decisions]) -> Self {
        let valid: Vec<&Vec<[bool; 4]>> = decisions.iter().flatten().collect();
        let invalid = decisions.len() - valid.len();
        let r = valid.len();
        let rows = config
            .beta0_grid
            .iter()
            .enumerate()
            .map(|(k, &beta0)| {
                let mut counts = [0usize; 4];
                for d in &valid {
                    for t in 0..4 {
                        counts[t] += d[k][t] as usize;
                    }
                }
                let rates = counts.map(|c| if r == 0 { f64::NAN } else { c as f64 / r as f64 });
                let mut row = PowerRow {
                    beta0,
                    wald: rates[0],
                    lm: rates[1],
                    ar: rates[2],
                    combined: rates[3],
                    mc_std_err: 0.0,
                    valid: r,
                    invalid_count: invalid,
                };
                row.mc_std_err = rates.iter().map(|&p| row.std_err(p)).fold(0.0, f64::max);
                row
            })
            .collect();
        Self {
            beta_true: config.beta_true,
            alpha_level: config.alpha_level,
            rows,
        }
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.beta0, r.wald, r.lm, r.ar, r.combined, r.mc_std_err, r.valid, r.invalid_count
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV output is ASCII")
    }

    /// Largest `combined − wald` over the grid.
    pub fn max_gap_combined_wald(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.combined - r.wald)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn invalid_count(&self) -> usize {
        self.rows.first().map_or(0, |r| r.invalid_count)
    }

    /// Row whose null is closest to the true coefficient.
    pub fn null_row(&self) -> Option<&PowerRow> {
        self.rows
            .iter()
            .min_by(|a, b| (a.beta0 - self.beta_true).abs().total_cmp(&(b.beta0 - self.beta_true).abs()))
    }
}

/// Rejection rates of the four tests over `config.beta0_grid`.
/// `workers = None` uses rayon's default pool size. The table does not
/// depend on the worker count.
pub fn power_curve(config: &DGPConfig, workers: Option<usize>) -> Result<PowerTable> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CcivError::InvalidInput(format!("cannot build worker pool: {e}")))?;
    let decisions: Vec<Decisions> = pool.install(|| {
        (0..config.replications as u64)
            .into_par_iter()
            .map(|rep| replicate(config, rep))
            .collect()
    });
    Ok(PowerTable::from_decisions(config, &decisions))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DGPConfig {
        DGPConfig {
            n: 120,
            clusters: 40,
            num_many_iv: 10,
            num_controls: 2,
            replications: 12,
            beta0_grid: vec![0.0, 0.3, 0.6],
            ..DGPConfig::default()
        }
    }

    #[test]
    fn table_shape_and_ranges() {
        let t = power_curve(&tiny(), Some(1)).unwrap();
        assert_eq!(t.rows.len(), 3);
        for r in &t.rows {
            assert_eq!(r.valid + r.invalid_count, 12);
            for p in r.rates() {
                assert!((0.0..=1.0).contains(&p));
            }
        }
        assert_eq!(t.null_row().unwrap().beta0, 0.3);
        let csv = t.to_csv_string();
        assert_eq!(csv.lines().next().unwrap(), PowerTable::HEADER);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let a = power_curve(&tiny(), Some(1)).unwrap().to_csv_string();
        let b = power_curve(&tiny(), Some(3)).unwrap().to_csv_string();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_counts_invalid() {
        let c = tiny();
        let decisions = vec![
            Some(vec![[true, false, false, true]; 3]),
            None,
            Some(vec![[false, false, true, true]; 3]),
            Some(vec![[false, true, false, false]; 3]),
        ];
        let t = PowerTable::from_decisions(&c, &decisions);
        let r = t.rows[0];
        assert_eq!((r.valid, r.invalid_count), (3, 1));
        assert!((r.wald - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.combined - 2.0 / 3.0).abs() < 1e-15);
        let se = (2.0 / 9.0 / 3.0_f64).sqrt();
        assert!((r.mc_std_err - se).abs() < 1e-15);
    }
}
