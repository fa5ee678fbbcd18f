//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Singular values below `rel_tol · σ_max` are treated as zero.
pub const DEFAULT_PINV_TOL: f64 = 1e-12;

/// Moore–Penrose inverse by truncated SVD, with the retained rank.
pub fn pinv(a: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize) {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return (DMatrix::zeros(n, m), 0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = rel_tol * smax;
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(n, m);
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            rank += 1;
            // out += v_k u_kᵀ / s
            out.ger(1.0 / s, &vt.row(k).transpose(), &u.column(k), 1.0);
        }
    }
    (out, rank)
}

/// Numerical rank at the same truncation rule as [`pinv`].
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let cut = rel_tol * sv.max();
    sv.iter().filter(|&&s| s > cut && s > 0.0).count()
}

/// Cholesky factor of a symmetric matrix when every pivot exceeds
/// `rel_tol` times the largest diagonal entry.
pub fn cholesky_checked(a: &DMatrix<f64>, rel_tol: f64) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let maxdiag = a.diagonal().iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let chol = a.clone().cholesky()?;
    let l = chol.l_dirty();
    let minpiv = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    (minpiv > rel_tol * maxdiag).then_some(chol)
}

/// Inverse of a symmetric positive-definite matrix, `None` if it is not
/// numerically positive definite.
pub fn spd_inverse(a: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    cholesky_checked(a, rel_tol).map(|c| c.inverse())
}

/// Solves `a x = b` for symmetric PSD `a`: Cholesky when well conditioned,
/// pseudo-inverse otherwise.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> DVector<f64> {
    match cholesky_checked(a, rel_tol) {
        Some(c) => c.solve(b),
        None => pinv(a, rel_tol).0 * b,
    }
}

/// `log det a` for symmetric positive-definite `a`.
pub fn log_det_spd(a: &DMatrix<f64>) -> Option<f64> {
    let c = a.clone().cholesky()?;
    let l = c.l_dirty();
    Some((0..a.nrows()).map(|i| 2.0 * l[(i, i)].ln()).sum())
}

/// `Xᵀ diag(w) X`.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[i];
    }
    x.transpose() * xw
}

/// `Xᵀ w` with `w` a per-row weight.
pub fn weighted_colsum(x: &DMatrix<f64>, w: &DVector<f64>) -> DVector<f64> {
    x.tr_mul(w)
}

/// Largest absolute entry; 0 for empty vectors.
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}
