//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Symmetrize in place: `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square-root factor `F = V Λ^{1/2}` of a symmetric PSD matrix, so that
/// `F Fᵀ = M`. Eigenvalues down to `-neg_tol · max(1, ‖M‖)` are clipped to
/// zero; anything more negative is rejected and its value returned.
pub fn psd_factor(m: &DMatrix<f64>, neg_tol: f64) -> Result<DMatrix<f64>, f64> {
    let n = m.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let eig = symmetrize(m).symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut f = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -neg_tol * scale {
            return Err(lam);
        }
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    Ok(f)
}

/// Compressed factor: like [`psd_factor`] but drops columns whose
/// eigenvalue is below `rel_drop · λ_max`. The result has as few columns as
/// the numerical rank allows.
pub fn compressed_factor(m: &DMatrix<f64>, rel_drop: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let eig = symmetrize(m).symmetric_eigen();
    let lmax = eig.eigenvalues.max().max(0.0);
    if lmax == 0.0 {
        return DMatrix::zeros(n, 0);
    }
    let keep: Vec<usize> = (0..n)
        .filter(|&j| eig.eigenvalues[j] > rel_drop * lmax)
        .collect();
    let mut f = DMatrix::zeros(n, keep.len());
    for (c, &j) in keep.iter().enumerate() {
        f.set_column(c, &(eig.eigenvectors.column(j) * eig.eigenvalues[j].sqrt()));
    }
    f
}

/// Inverse square root `M^{-1/2}` of a symmetric positive definite matrix.
/// Returns `None` if `M` is not positive definite.
pub fn inv_sqrt_spd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let d = DVector::from_iterator(m.nrows(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.min()
}

/// Largest eigenvalue of the symmetric part of `m`.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigen().eigenvalues.max()
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    // Gram matrix of the smaller side keeps the eigenproblem small.
    let g = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    max_eigenvalue(&g).max(0.0).sqrt()
}

/// Horizontal concatenation of blocks with equal row counts.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hstack row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}
