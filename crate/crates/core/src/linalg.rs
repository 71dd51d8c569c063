//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singularity tolerance on Gram spectra.
pub const SINGULAR_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Ratio of largest to smallest eigenvalue; infinite when the smallest is not positive.
pub fn condition_number(spectrum: &[f64]) -> f64 {
    match (spectrum.first(), spectrum.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Checks that `gram` is numerically nonsingular and returns its condition number.
pub fn check_gram(gram: &DMatrix<f64>, what: &str) -> Result<f64> {
    let (spectrum, vectors) = sym_eigen_desc(gram);
    let hi = spectrum.first().copied().unwrap_or(0.0);
    let lo = spectrum.last().copied().unwrap_or(0.0);
    if !(hi > 0.0) || lo <= SINGULAR_TOL * hi || !lo.is_finite() {
        let k = spectrum.len().saturating_sub(1);
        let eigenvector = (vectors.ncols() > 0).then(|| vectors.column(k).iter().copied().collect());
        return Err(Error::Identification {
            message: format!(
                "{what} is rank deficient (min eigenvalue {lo:.3e}, max {hi:.3e})"
            ),
            spectrum,
            eigenvector,
        });
    }
    Ok(hi / lo)
}

/// (1/n) AᵀA.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows() as f64;
    a.tr_mul(a) / n
}

/// (1/n) Σ wᵢ aᵢaᵢᵀ.
pub fn weighted_gram(a: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let scaled = DMatrix::from_fn(n, a.ncols(), |i, j| a[(i, j)] * w[i]);
    a.tr_mul(&scaled) / n as f64
}

/// Least squares through a Householder QR of `a`. Requires full column rank.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let qr = a.clone().qr();
    let qtb = qr.q().tr_mul(b);
    qr.r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::numeric("triangular solve failed in least squares"))
}

/// Same as [`lstsq`] for several right-hand sides.
pub fn lstsq_multi(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = a.clone().qr();
    let qtb = qr.q().tr_mul(b);
    qr.r()
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::numeric("triangular solve failed in least squares"))
}

/// S⁻¹ M S⁻¹ for symmetric positive definite S, computed with solves.
pub fn sandwich(s: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(s)
        .cholesky()
        .ok_or_else(|| Error::numeric("sandwich bread is not positive definite"))?;
    let left = chol.solve(m);
    let v = chol.solve(&left.transpose());
    Ok(symmetrize(&v))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(s)
        .cholesky()
        .ok_or_else(|| Error::numeric("matrix is not positive definite"))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Singular values sorted descending.
pub fn singular_values_desc(a: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = a.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// R² of an OLS regression of `y` on the columns of `x` (which should include a constant).
pub fn r_squared(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if tss <= 0.0 {
        return 1.0;
    }
    let coef = match lstsq(x, y) {
        Ok(c) => c,
        Err(_) => return 1.0,
    };
    let rss = (y - x * coef).norm_squared();
    (1.0 - rss / tss).clamp(0.0, 1.0)
}

/// Sample standard deviation with the n−1 denominator.
pub fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 1.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![5.0, 2.0, 1.0]);
        assert_relative_eq!(vecs[(1, 0)].abs(), 1.0);
    }

    #[test]
    fn lstsq_matches_normal_equations() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 3.0, 4.0, 8.0]);
        let x = lstsq(&a, &b).unwrap();
        let ne = (a.transpose() * &a).try_inverse().unwrap() * a.transpose() * &b;
        assert_relative_eq!(x, ne, epsilon = 1e-12);
    }

    #[test]
    fn sandwich_matches_explicit_inverse() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m = DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.7]);
        let si = s.clone().try_inverse().unwrap();
        assert_relative_eq!(sandwich(&s, &m).unwrap(), &si * m * &si, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_gram_reports_direction() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        match check_gram(&gram(&a), "test") {
            Err(Error::Identification { eigenvector, .. }) => {
                let v = eigenvector.unwrap();
                assert_relative_eq!(v[0] + 2.0 * v[1], 0.0, epsilon = 1e-8);
            }
            other => panic!("expected identification error, got {other:?}"),
        }
    }
}
