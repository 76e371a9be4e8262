//! Combined inference for linear IV regression with clustered data.
//!
//! A cluster-robust Wald test on low-dimensional instruments and
//! leave-one-cluster-out jackknife LM and AR tests on many instruments are
//! combined into a single chi-squared test whose weights come from the
//! estimated strength of each instrument set and the correlation between the
//! three statistics. A Monte Carlo engine reproduces the panel simulation
//! design used to study power.

pub mod combiner;
pub mod data;
pub mod error;
pub mod jackknife;
pub mod linalg;
pub mod oracle;
pub mod simulator;
pub mod wald;

#[cfg(test)]
pub(crate) mod testutil;

pub use combiner::{run_inference, InferenceConfig, InferenceFit, InferenceReport};
pub use data::{load_csv, partial_out, validate, ClusterPartition, ClusteredIVData, TransformedDesign};
pub use error::{CcivError, Result};
pub use wald::Weighting;
