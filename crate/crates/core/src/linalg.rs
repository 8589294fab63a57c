//! Small dense linear-algebra helpers shared by the filters and the
//! stability checker.

use nalgebra::{DMatrix, DVector};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Returns `(m + mᵀ) / 2`.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Square-root factor `L` with `L Lᵀ = m` for a symmetric PSD matrix.
/// Negative eigenvalues from round-off are clipped to zero.
pub fn psd_sqrt(m: &Mat) -> Mat {
    let eig = symmetrize(m).symmetric_eigen();
    let n = m.nrows();
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    scaled
}

/// Numerical rank: number of singular values above `rel_tol * max(σ_max, scale)`.
///
/// `scale` is the magnitude the entries would have without cancellation. A
/// matrix that is zero up to rounding has a tiny `σ_max`, so a purely relative
/// threshold would count its noise as rank.
pub fn numerical_rank(m: &Mat, rel_tol: f64, scale: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().copied().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    let threshold = rel_tol * smax.max(scale);
    sv.iter().filter(|&&s| s > threshold).count()
}

/// Stacks matrices with equal column counts on top of each other.
pub fn vstack(blocks: &[Mat], ncols: usize) -> Mat {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Mat::zeros(rows, ncols);
    let mut at = 0;
    for b in blocks {
        debug_assert_eq!(b.ncols(), ncols);
        out.view_mut((at, 0), (b.nrows(), ncols)).copy_from(b);
        at += b.nrows();
    }
    out
}

pub fn relative_frobenius(a: &Mat, b: &Mat) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_reconstructs() {
        let q = Mat::from_row_slice(3, 3, &[2.0, 0.5, 0.0, 0.5, 1.0, 0.2, 0.0, 0.2, 0.5]);
        let l = psd_sqrt(&q);
        assert!(relative_frobenius(&(&l * l.transpose()), &q) < 1e-12);
    }

    #[test]
    fn psd_sqrt_of_rank_deficient() {
        let v = Vector::from_vec(vec![1.0, 2.0, -1.0]);
        let q = &v * v.transpose();
        let l = psd_sqrt(&q);
        assert!(relative_frobenius(&(&l * l.transpose()), &q) < 1e-12);
        assert!(l.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rank_of_stacked_rows() {
        let m = Mat::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(numerical_rank(&m, 1e-9, 0.0), 1);
        assert_eq!(numerical_rank(&(m.clone() * 1e-14), 1e-9, 1.0), 0);
        assert_eq!(numerical_rank(&Mat::zeros(2, 2), 1e-9, 1.0), 0);
        assert_eq!(numerical_rank(&Mat::identity(4, 4), 1e-9, 1.0), 4);
    }
}
