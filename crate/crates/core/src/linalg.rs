//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative tolerance below which a column is treated as linearly dependent
/// on the columns before it.
pub const DEPENDENCE_TOL: f64 = 1e-8;

/// Builds an `n × k` matrix from column vectors.
pub fn from_columns(n: usize, cols: &[&[f64]]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        debug_assert_eq!(c.len(), n);
        m.column_mut(j).copy_from_slice(c);
    }
    m
}

/// Modified Gram–Schmidt with one re-orthogonalisation pass.
///
/// Returns an orthonormal basis of the span of `m` together with the indices
/// of the columns that contributed a new direction. A column is dropped when
/// its residual norm falls below `DEPENDENCE_TOL` times `scale[j]` (or its own
/// norm when no scale is given).
pub fn orthonormal_basis(m: &DMatrix<f64>, scale: Option<&[f64]>) -> (DMatrix<f64>, Vec<usize>) {
    let n = m.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..m.ncols() {
        let mut v: DVector<f64> = m.column(j).into_owned();
        let reference = scale.map(|s| s[j]).unwrap_or_else(|| v.norm());
        if reference == 0.0 || !reference.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.axpy(-proj, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > DEPENDENCE_TOL * reference {
            basis.push(v / norm);
            kept.push(j);
        }
    }
    let mut q = DMatrix::zeros(n, basis.len());
    for (j, b) in basis.iter().enumerate() {
        q.set_column(j, b);
    }
    (q, kept)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let sym = symmetrize(m);
    sym.cholesky().map(|c| c.inverse())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Clips negative eigenvalues of a symmetric matrix at zero.
///
/// Returns the repaired matrix and whether any eigenvalue was clipped.
pub fn clip_to_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if m.nrows() == 0 {
        return (m.clone(), false);
    }
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return (sym, false);
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), true)
}

/// Symmetric square root of a positive semi-definite matrix.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_schmidt_drops_dependent_columns() {
        let m = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.0, 1.0, 2.0, 1.0, 1.0, 2.0, 0.0, 1.0, 2.0, 3.0]);
        let (q, kept) = orthonormal_basis(&m, None);
        assert_eq!(kept, vec![0, 2]);
        let gram = q.transpose() * &q;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn psd_clip_repairs_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let (fixed, clipped) = clip_to_psd(&m);
        assert!(clipped);
        assert!(min_eigenvalue(&fixed) > -1e-12);
        assert!((max_eigenvalue(&fixed) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = psd_sqrt(&m);
        assert!((&r * &r - m).amax() < 1e-12);
    }
}
