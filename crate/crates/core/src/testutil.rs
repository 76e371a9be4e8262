//! Small random fixtures shared by unit tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ClusterPartition, ClusteredIVData};

/// Uniform(-1, 1) data with one low-dimensional instrument.
pub(crate) fn random_data(seed: u64, sizes: Vec<usize>, dw: usize, k: usize) -> ClusteredIVData {
    random_data_dz(seed, sizes, dw, k, 1)
}

pub(crate) fn random_data_dz(
    seed: u64,
    sizes: Vec<usize>,
    dw: usize,
    k: usize,
    dz: usize,
) -> ClusteredIVData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let partition = ClusterPartition::new(sizes).unwrap();
    let n = partition.n();
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
    let w = draw(n, dw);
    let z = draw(n, k);
    let zl = draw(n, dz);
    let noise = draw(n, 2);
    // Some first-stage signal so the estimators are well defined.
    let x: DVector<f64> = DVector::from_fn(n, |i, _| {
        z.row(i).sum() * 0.5 + zl.row(i).sum() + noise[(i, 0)]
    });
    let y: DVector<f64> = DVector::from_fn(n, |i, _| 0.3 * x[i] + noise[(i, 1)] + 0.5 * noise[(i, 0)]);
    ClusteredIVData::new(y, x, w, z, zl, partition).unwrap()
}
