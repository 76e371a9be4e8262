use nalgebra::{DMatrix, DVector};

use super::{ClusterPartition, ClusteredIVData};
use crate::error::Result;
use crate::linalg::{orthonormal_basis, projection_from_basis, SymMatrix};

/// The design after partialling out the controls, with every `n × n`
/// matrix the jackknife statistics need.
///
/// `P`, `P̄`, `Q` and `Q̄` are dense, so building a design costs
/// `O(n²K + n² d_w)` time and `O(n²)` memory per matrix.
#[derive(Debug, Clone)]
pub struct TransformedDesign {
    /// `M_W Ỹ`
    pub y: DVector<f64>,
    /// `M_W X̃`
    pub x: DVector<f64>,
    /// The regressor before partialling out.
    pub x_tilde: DVector<f64>,
    /// `M_W Z̃` (n × K)
    pub many_iv: DMatrix<f64>,
    /// `M_W z̃` (n × d_z)
    pub lowdim_iv: DMatrix<f64>,
    /// Orthonormal basis of `col(W)`, so that `M_W = I − U Uᵀ`.
    pub control_basis: DMatrix<f64>,
    pub m_w: SymMatrix,
    /// Projection onto `col(Z)`.
    pub p: SymMatrix,
    /// Cluster-diagonal blocks of `P`.
    pub p_bar: SymMatrix,
    /// `M_W (P − P̄) M_W`
    pub q: SymMatrix,
    /// Cluster-diagonal blocks of `Q`.
    pub q_bar: SymMatrix,
    pub partition: ClusterPartition,
}

impl TransformedDesign {
    pub fn n(&self) -> usize {
        self.partition.n()
    }

    /// `M_W v`
    pub fn annihilate(&self, v: &DVector<f64>) -> DVector<f64> {
        residualize(&self.control_basis, v)
    }
}

fn residualize(basis: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if basis.ncols() == 0 {
        return v.clone();
    }
    v - basis * basis.tr_mul(v)
}

fn residualize_columns(basis: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    if basis.ncols() == 0 {
        return m.clone();
    }
    m - basis * basis.tr_mul(m)
}

/// `M A M` for symmetric `A` and `M = I − U Uᵀ`, in `O(n² d_w)`:
/// `A − U Bᵀ − B Uᵀ + U (Uᵀ B) Uᵀ` with `B = A U`.
fn sandwich_annihilator(basis: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    if basis.ncols() == 0 {
        return a.clone();
    }
    let b = a * basis;
    let utb = basis.tr_mul(&b);
    let mut out = a.clone();
    out -= basis * b.transpose();
    out -= &b * basis.transpose();
    out += basis * utb * basis.transpose();
    out
}

/// Copy of `m` with every entry outside the cluster-diagonal blocks zeroed.
pub fn block_diagonal(m: &SymMatrix, partition: &ClusterPartition) -> SymMatrix {
    let n = m.dim();
    let mut out = DMatrix::zeros(n, n);
    for r in partition.ranges() {
        let len = r.len();
        out.view_mut((r.start, r.start), (len, len))
            .copy_from(&m.view((r.start, r.start), (len, len)));
    }
    SymMatrix::mirror_lower(out)
}

/// Partials the controls out of every variable and builds `P`, `P̄`, `Q`, `Q̄`.
pub fn partial_out(data: &ClusteredIVData) -> Result<TransformedDesign> {
    let n = data.n();
    let partition = data.partition().clone();
    let (control_basis, _) = orthonormal_basis(data.controls())?;

    let y = residualize(&control_basis, data.y());
    let x = residualize(&control_basis, data.x());
    let many_iv = residualize_columns(&control_basis, data.many_iv());
    let lowdim_iv = residualize_columns(&control_basis, data.lowdim_iv());

    let m_w = SymMatrix::mirror_lower(
        DMatrix::identity(n, n) - &control_basis * control_basis.transpose(),
    );

    let (iv_basis, _) = orthonormal_basis(&many_iv)?;
    let p = projection_from_basis(&iv_basis);
    let p_bar = block_diagonal(&p, &partition);
    let q = SymMatrix::mirror_lower(sandwich_annihilator(
        &control_basis,
        &(p.as_matrix() - p_bar.as_matrix()),
    ));
    let q_bar = block_diagonal(&q, &partition);

    Ok(TransformedDesign {
        y,
        x,
        x_tilde: data.x().clone(),
        many_iv,
        lowdim_iv,
        control_basis,
        m_w,
        p,
        p_bar,
        q,
        q_bar,
        partition,
    })
}
