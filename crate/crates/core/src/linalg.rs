//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub fn all_finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &Mat) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Principal square root of a symmetric PSD matrix. Tiny negative
/// eigenvalues from rounding are clamped to zero.
pub fn psd_sqrt(m: &Mat) -> Mat {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Spectral radius. The real Schur form is used for non-symmetric input.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "spectral radius needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !all_finite(m) {
        return Err(Error::NonFinite("spectral radius input".into()));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Conditioning("schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

pub fn kron(a: &Mat, b: &Mat) -> Mat {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = Mat::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = s * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Solves `X = W + A X Aᵀ` through the vectorized system
/// `(I − A⊗A) vec(X) = vec(W)`. The caller is responsible for checking
/// stability; a singular system is reported as a conditioning error.
pub fn stein_solve(a: &Mat, w: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if !a.is_square() || w.shape() != (n, n) {
        return Err(Error::dim(format!(
            "lyapunov operands must be square and conform: A {:?}, W {:?}",
            a.shape(),
            w.shape()
        )));
    }
    let lhs = Mat::identity(n * n, n * n) - kron(a, a);
    // column-major storage: vec(AXAᵀ) = (A⊗A) vec(X)
    let rhs = Vector::from_column_slice(w.as_slice());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Conditioning("singular lyapunov operator".into()))?;
    let x = Mat::from_column_slice(n, n, sol.as_slice());
    Ok(symmetrize(&x))
}

/// Solves a symmetric positive definite system, falling back to LU when the
/// Cholesky factorization fails.
pub fn spd_solve(m: &Mat, rhs: &Vector) -> Result<Vector> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    m.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Conditioning("singular system".into()))
}

pub fn spd_inverse(m: &Mat) -> Result<Mat> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.inverse());
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Conditioning("matrix is singular".into()))
}

/// Row-major flattening, used for policy parameter vectors.
pub fn flatten_row_major(m: &Mat) -> Vector {
    Vector::from_iterator(m.len(), m.transpose().iter().copied())
}

pub fn unflatten_row_major(v: &Vector, rows: usize, cols: usize) -> Mat {
    Mat::from_row_slice(rows, cols, v.as_slice())
}

/// Solves `(λI + (1/N) Σ_k j_k j_kᵀ) z = rhs` for a Gram matrix given by its
/// rows, choosing between the direct and the Woodbury form by size.
pub fn ridge_gram_solve(rows: &Mat, ridge: f64, rhs: &Vector) -> Result<Vector> {
    let (n_rows, dim) = rows.shape();
    if rhs.len() != dim {
        return Err(Error::dim("gram rhs length"));
    }
    if n_rows == 0 {
        return Ok(rhs / ridge);
    }
    let scale = 1.0 / n_rows as f64;
    if dim <= n_rows {
        let mut h = rows.tr_mul(rows) * scale;
        for i in 0..dim {
            h[(i, i)] += ridge;
        }
        spd_solve(&h, rhs)
    } else {
        // (λI + c JᵀJ)⁻¹ = (1/λ)(I − Jᵀ(λ/c I + J Jᵀ)⁻¹ J)
        let mut small = rows * rows.transpose();
        for i in 0..n_rows {
            small[(i, i)] += ridge / scale;
        }
        let jr = rows * rhs;
        let y = spd_solve(&small, &jr)?;
        Ok((rhs - rows.tr_mul(&y)) / ridge)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kron_matches_definition() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = Mat::from_row_slice(1, 2, &[0.5, -1.0]);
        let k = kron(&a, &b);
        assert_eq!(k.shape(), (2, 4));
        assert_eq!(k[(1, 2)], 4.0 * 0.5);
        assert_eq!(k[(0, 1)], -1.0);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let m = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert_relative_eq!(&s * &s, m, epsilon = 1e-12);
    }

    #[test]
    fn ridge_gram_both_branches_agree() {
        let rows = Mat::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let rhs = Vector::from_fn(5, |i, _| i as f64 + 1.0);
        let direct = {
            let mut h = rows.tr_mul(&rows) / 3.0;
            for i in 0..5 {
                h[(i, i)] += 0.1;
            }
            h.lu().solve(&rhs).unwrap()
        };
        let via = ridge_gram_solve(&rows, 0.1, &rhs).unwrap();
        assert_relative_eq!(direct, via, epsilon = 1e-10);
    }

    #[test]
    fn spectral_radius_rejects_non_square() {
        assert!(spectral_radius(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn row_major_roundtrip() {
        let m = Mat::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = flatten_row_major(&m);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unflatten_row_major(&v, 2, 3), m);
    }
}
