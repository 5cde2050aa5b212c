//! Dense linear algebra helpers: row-major GEMM on slices and a few
//! factorizations on `nalgebra` matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// `c ← α·op(a)·op(b) + β·c` on row-major slices, `op(a)` being `m × k` and
/// `op(b)` being `k × n`. With `ta`, `a` is stored as `k × m`; likewise `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the `m×k`, `k×n` and `m×n`
    // row-major buffers whose lengths are checked on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Symmetrizes in place: `m ← (m + mᵀ)/2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub(crate) fn mean_trace(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        0.0
    } else {
        m.trace() / m.nrows() as f64
    }
}

/// `m + reg·I`.
pub(crate) fn regularized(m: &DMatrix<f64>, reg: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..out.nrows() {
        out[(i, i)] += reg;
    }
    out
}

/// Cholesky factor, or the smallest eigenvalue when factorization fails.
pub(crate) fn cholesky(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite { min_eig: SymmetricEigen::new(m.clone()).eigenvalues.min() })
}

/// Eigen-decomposition of a symmetric matrix.
pub(crate) fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut m = m.clone();
    symmetrize(&mut m);
    let e = SymmetricEigen::new(m);
    (e.eigenvalues, e.eigenvectors)
}
