//! Clustered IV data: containers, CSV ingestion, assumption checks and the
//! partialled-out design the estimators work on.

mod csv_io;
mod design;
mod validate;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{CcivError, Result};

pub use csv_io::{load_csv, write_csv, ColumnSchema};
pub use design::{block_diagonal, partial_out, TransformedDesign};
pub use validate::{validate, validate_with, ValidationCheck, ValidationOptions, ValidationReport};

/// Largest number of controls or low-dimensional instruments accepted.
pub const MAX_SMALL_DIM: usize = 64;

/// Contiguous cluster blocks `I_g = [N_{g-1}, N_g)` (0-based, half open).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl ClusterPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(CcivError::InvalidInput("partition needs at least one cluster".into()));
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(CcivError::InvalidInput(format!("cluster {g} is empty")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &s in &sizes {
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Self { sizes, offsets })
    }

    /// `n` singleton clusters.
    pub fn singletons(n: usize) -> Result<Self> {
        Self::new(vec![1; n])
    }

    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn max_size(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    pub fn range(&self, g: usize) -> Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.offsets.windows(2).map(|w| w[0]..w[1])
    }

    /// Cluster index of every observation.
    pub fn membership(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n());
        for (g, &s) in self.sizes.iter().enumerate() {
            out.extend(std::iter::repeat_n(g, s));
        }
        out
    }
}

/// Raw observations of the structural equation
/// `Ỹ = X̃ β + W γ + ẽ` with many instruments `Z̃` and low-dimensional
/// instruments `z̃`, rows sorted into contiguous clusters.
#[derive(Debug, Clone)]
pub struct ClusteredIVData {
    y: DVector<f64>,
    x: DVector<f64>,
    controls: DMatrix<f64>,
    many_iv: DMatrix<f64>,
    lowdim_iv: DMatrix<f64>,
    partition: ClusterPartition,
    labels: Vec<String>,
}

impl ClusteredIVData {
    pub fn new(
        y: DVector<f64>,
        x: DVector<f64>,
        controls: DMatrix<f64>,
        many_iv: DMatrix<f64>,
        lowdim_iv: DMatrix<f64>,
        partition: ClusterPartition,
    ) -> Result<Self> {
        let labels = (1..=partition.num_clusters()).map(|g| format!("g{g}")).collect();
        Self::with_labels(y, x, controls, many_iv, lowdim_iv, partition, labels)
    }

    pub fn with_labels(
        y: DVector<f64>,
        x: DVector<f64>,
        controls: DMatrix<f64>,
        many_iv: DMatrix<f64>,
        lowdim_iv: DMatrix<f64>,
        partition: ClusterPartition,
        labels: Vec<String>,
    ) -> Result<Self> {
        let n = partition.n();
        let rows = [
            ("y", y.len()),
            ("x", x.len()),
            ("controls", controls.nrows()),
            ("many instruments", many_iv.nrows()),
            ("low-dimensional instruments", lowdim_iv.nrows()),
        ];
        for (name, r) in rows {
            if r != n {
                return Err(CcivError::InvalidInput(format!(
                    "{name} has {r} rows but the partition covers {n}"
                )));
            }
        }
        if labels.len() != partition.num_clusters() {
            return Err(CcivError::InvalidInput("one label per cluster required".into()));
        }
        if controls.ncols() > MAX_SMALL_DIM || lowdim_iv.ncols() > MAX_SMALL_DIM {
            return Err(CcivError::InvalidInput(format!(
                "at most {MAX_SMALL_DIM} controls and low-dimensional instruments supported"
            )));
        }
        if lowdim_iv.ncols() == 0 {
            return Err(CcivError::InvalidInput("need at least one low-dimensional instrument".into()));
        }
        if many_iv.ncols() == 0 {
            return Err(CcivError::InvalidInput("need at least one many-IV column".into()));
        }
        let finite = y.iter().chain(x.iter()).all(|v| v.is_finite())
            && controls.iter().all(|v| v.is_finite())
            && many_iv.iter().all(|v| v.is_finite())
            && lowdim_iv.iter().all(|v| v.is_finite());
        if !finite {
            return Err(CcivError::InvalidInput("data contains NaN or infinite values".into()));
        }
        Ok(Self {
            y,
            x,
            controls,
            many_iv,
            lowdim_iv,
            partition,
            labels,
        })
    }

    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn controls(&self) -> &DMatrix<f64> {
        &self.controls
    }

    pub fn many_iv(&self) -> &DMatrix<f64> {
        &self.many_iv
    }

    pub fn lowdim_iv(&self) -> &DMatrix<f64> {
        &self.lowdim_iv
    }

    pub fn partition(&self) -> &ClusterPartition {
        &self.partition
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_controls(&self) -> usize {
        self.controls.ncols()
    }

    pub fn num_many_iv(&self) -> usize {
        self.many_iv.ncols()
    }

    pub fn num_lowdim_iv(&self) -> usize {
        self.lowdim_iv.ncols()
    }

    /// Subtracts cluster means from every variable, absorbing cluster fixed
    /// effects.
    pub fn demean_within_clusters(&self) -> ClusteredIVData {
        let p = &self.partition;
        let mut out = self.clone();
        demean_vector(&mut out.y, p);
        demean_vector(&mut out.x, p);
        demean_columns(&mut out.controls, p);
        demean_columns(&mut out.many_iv, p);
        demean_columns(&mut out.lowdim_iv, p);
        out
    }

    /// Same data with the many and low-dimensional instrument blocks replaced.
    pub fn with_instruments(
        &self,
        many_iv: DMatrix<f64>,
        lowdim_iv: DMatrix<f64>,
    ) -> Result<ClusteredIVData> {
        Self::with_labels(
            self.y.clone(),
            self.x.clone(),
            self.controls.clone(),
            many_iv,
            lowdim_iv,
            self.partition.clone(),
            self.labels.clone(),
        )
    }
}

pub(crate) fn demean_vector(v: &mut DVector<f64>, partition: &ClusterPartition) {
    for r in partition.ranges() {
        let len = r.len() as f64;
        let mean = v.rows_range(r.clone()).sum() / len;
        v.rows_range_mut(r).add_scalar_mut(-mean);
    }
}

pub(crate) fn demean_columns(m: &mut DMatrix<f64>, partition: &ClusterPartition) {
    for mut col in m.column_iter_mut() {
        for r in partition.ranges() {
            let len = r.len() as f64;
            let mean = col.rows_range(r.clone()).sum() / len;
            col.rows_range_mut(r).add_scalar_mut(-mean);
        }
    }
}
