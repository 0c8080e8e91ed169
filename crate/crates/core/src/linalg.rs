//! Minimum-norm least squares through a truncated pseudoinverse.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_REL_CUTOFF: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LstsqSolution {
    /// `cols x outs`, row-major.
    pub coef: Vec<f64>,
    pub rank: usize,
    /// Descending.
    pub singular_values: Vec<f64>,
}

/// Solves `min ||X B - Y||_F` with the Moore-Penrose pseudoinverse of `X`.
///
/// `x` is `rows x cols` and `y` is `rows x outs`, both row-major. The
/// decomposition runs on the Gram matrix `X^T X`, so the cost is linear in
/// `rows`; its eigenvalues are the squared singular values of `X`.
pub fn lstsq_pinv(x: &[f64], y: &[f64], rows: usize, cols: usize, outs: usize, rel_cutoff: f64) -> LstsqSolution {
    assert_eq!(x.len(), rows * cols);
    assert_eq!(y.len(), rows * outs);
    let mut gram = vec![0.0f64; cols * cols];
    let mut xty = vec![0.0f64; cols * outs];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let yr = &y[r * outs..(r + 1) * outs];
        for (a, &xa) in xr.iter().enumerate() {
            if xa == 0.0 {
                continue;
            }
            let g = &mut gram[a * cols..(a + 1) * cols];
            for (gv, &xb) in g.iter_mut().zip(xr) {
                *gv += xa * xb;
            }
            let t = &mut xty[a * outs..(a + 1) * outs];
            for (tv, &yv) in t.iter_mut().zip(yr) {
                *tv += xa * yv;
            }
        }
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(cols, cols, &gram));
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let singular_values: Vec<f64> = order.iter().map(|&k| libm::sqrt(eig.eigenvalues[k].max(0.0))).collect();
    let sigma_max = singular_values.first().copied().unwrap_or(0.0);
    let keep: Vec<usize> = order
        .iter()
        .zip(&singular_values)
        .filter(|(_, &s)| s > rel_cutoff * sigma_max && s > 0.0)
        .map(|(&k, _)| k)
        .collect();
    // B = V_k diag(1 / lambda_k) V_k^T X^T Y
    let v = &eig.eigenvectors;
    let mut coef = vec![0.0f64; cols * outs];
    for &k in &keep {
        let lambda = eig.eigenvalues[k];
        let mut proj = vec![0.0f64; outs];
        for a in 0..cols {
            let va = v[(a, k)];
            for (p, &t) in proj.iter_mut().zip(&xty[a * outs..(a + 1) * outs]) {
                *p += va * t;
            }
        }
        for a in 0..cols {
            let s = v[(a, k)] / lambda;
            for (c, &p) in coef[a * outs..(a + 1) * outs].iter_mut().zip(&proj) {
                *c += s * p;
            }
        }
    }
    LstsqSolution {
        coef,
        rank: keep.len(),
        singular_values,
    }
}
