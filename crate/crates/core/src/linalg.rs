//! Shared numerical helpers.

use nalgebra::DMatrix;

/// Relative singular-value threshold used for all rank decisions.
pub const RANK_REL_TOL: f64 = 1e-8;

/// Relative singular-value cutoff for pseudoinverses.
pub const PINV_REL_CUTOFF: f64 = 1e-10;

/// Numerical rank: number of singular values above `rel_tol` times the largest.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    if max <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Moore–Penrose pseudoinverse via SVD, dropping singular values below
/// `rel_cutoff` times the largest.
pub fn pseudo_inverse(m: &DMatrix<f64>, rel_cutoff: f64) -> DMatrix<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let svd = nalgebra::SVD::new(m.clone(), true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let vt = svd.v_t.as_ref().expect("svd with v_t");
    let max = svd.singular_values.max();
    let mut inv_s = svd.singular_values.clone();
    for s in inv_s.iter_mut() {
        *s = if *s > rel_cutoff * max { 1.0 / *s } else { 0.0 };
    }
    // V * S^{-1} * U^T without forming the diagonal explicitly.
    let mut ut = u.transpose();
    for (i, s) in inv_s.iter().enumerate() {
        ut.row_mut(i).scale_mut(*s);
    }
    vt.transpose() * ut
}

/// Stack matrices vertically. All must share a column count.
pub fn vstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let ncols = blocks.first().map_or(0, |b| b.ncols());
    let nrows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(nrows, ncols);
    let mut at = 0;
    for b in blocks {
        assert_eq!(b.ncols(), ncols, "vstack: column mismatch");
        out.rows_mut(at, b.nrows()).copy_from(*b);
        at += b.nrows();
    }
    out
}
