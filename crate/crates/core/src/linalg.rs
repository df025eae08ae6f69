//! Small dense linear algebra used throughout the crate.
//!
//! Matrices here are tiny (the number of service phases is rarely above ten),
//! so everything is dense and direct. The symmetric eigensolver is a cyclic
//! Jacobi iteration: slow for large orders but unconditionally convergent and
//! accurate to a few ulps on the small, sometimes nearly singular, forms that
//! the Lyapunov certificates produce.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("Jacobi iteration did not converge in {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}

/// Eigendecomposition of a symmetric matrix.
///
/// `values` are ascending; column `i` of `vectors` is the unit eigenvector
/// belonging to `values[i]`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn min_vector(&self) -> DVector<f64> {
        self.vectors.column(0).into_owned()
    }

    /// Rebuilds `V diag(values) V'`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.vectors * DMatrix::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

const MAX_SWEEPS: usize = 100;

/// Entrywise sum of absolute values, the matrix norm used for all scale-aware
/// tolerances in this crate.
pub fn abs_sum(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `(M + M') / 2`.
pub fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix
/// by cyclic Jacobi rotations.
///
/// Input must be symmetric to within `1e-10 * max(1, |M|)`; the strictly upper
/// triangle is mirrored before iterating so that tiny asymmetries do not leak
/// into the result.
pub fn sym_eig(m: &DMatrix<f64>) -> Result<SymEigen, LinalgError> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let asym = max_asymmetry(m);
    if asym > 1e-10 * abs_sum(m).max(1.0) {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }

    let mut a = sym(m);
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();

    let mut converged = scale == 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * 1e-2 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that would be below rounding of both diagonals.
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) && apq.abs() < f64::MIN_POSITIVE.sqrt() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off > 1e-12 * scale {
            return Err(LinalgError::NoConvergence { sweeps: MAX_SWEEPS });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymEigen { values, vectors })
}

/// Smallest eigenvalue of a symmetric matrix; `+inf` for the empty matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    if m.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(sym_eig(m)?.min())
}

/// Orthonormal basis (as columns) of the hyperplane `{h : w'h = 0}`.
///
/// Built from a Householder reflector mapping `w/|w|` to a coordinate axis, so
/// the basis is exactly orthonormal up to rounding.
pub fn hyperplane_basis(w: &DVector<f64>) -> DMatrix<f64> {
    let k = w.len();
    if k <= 1 {
        return DMatrix::zeros(k, 0);
    }
    let norm = w.norm();
    let u = w / norm;
    // Reflect u onto -sign(u0) e_0 to avoid cancellation.
    let sign = if u[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut h = u.clone();
    h[0] += sign;
    let hn2 = h.norm_squared();
    let house = DMatrix::<f64>::identity(k, k) - (&h * h.transpose()) * (2.0 / hn2);
    // Columns 1..k of the reflector span u's orthogonal complement.
    house.columns(1, k - 1).into_owned()
}

/// Extreme values of the quadratic form `h'Mh` over unit vectors `h` in the
/// column span of the orthonormal `basis`. Returns `None` for an empty basis.
pub fn restricted_extremes(m: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<Option<(f64, f64)>, LinalgError> {
    if basis.ncols() == 0 {
        return Ok(None);
    }
    let restricted = sym(&(basis.transpose() * m * basis));
    let eig = sym_eig(&restricted)?;
    Ok(Some((eig.min(), eig.max())))
}

/// Inverse by LU with partial pivoting.
pub fn inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    m.clone().lu().try_inverse().ok_or(LinalgError::Singular)
}

/// 1-norm condition number estimate `|M|_1 |M^-1|_1`.
pub fn condition_1(m: &DMatrix<f64>, inv: &DMatrix<f64>) -> f64 {
    let col_norm = |a: &DMatrix<f64>| a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    col_norm(m) * col_norm(inv)
}

/// Solves the continuous Lyapunov equation `X A + A' X = C` for symmetric `C`
/// through its Kronecker form. Intended for the small orders used here.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let k = a.nrows();
    let eye = DMatrix::<f64>::identity(k, k);
    // vec(XA) = (A' ⊗ I) vec(X), vec(A'X) = (I ⊗ A') vec(X) in column-major order.
    let big = a.transpose().kronecker(&eye) + eye.kronecker(&a.transpose());
    let rhs = DVector::from_column_slice(c.as_slice());
    let sol = big.lu().solve(&rhs).ok_or(LinalgError::Singular)?;
    let x = DMatrix::from_column_slice(k, k, sol.as_slice());
    Ok(sym(&x))
}

/// Lower-triangular factor `L` with `L L' = M + jitter I`.
///
/// The jitter lets rank-deficient covariance blocks be factored; callers that
/// need an exact null direction project it out afterwards.
pub fn cholesky_jitter(m: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>, LinalgError> {
    let k = m.nrows();
    let shifted = sym(m) + DMatrix::<f64>::identity(k, k) * jitter;
    match shifted.clone().cholesky() {
        Some(ch) => Ok(ch.l()),
        None => Err(LinalgError::NotPsd {
            min_eigenvalue: lambda_min(&shifted)?,
        }),
    }
}

/// Spectral radius of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        sym(&a)
    }

    #[test]
    fn identity_eigenvalues_are_one() {
        let eig = sym_eig(&DMatrix::identity(3, 3)).unwrap();
        for v in eig.values.iter() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn diagonal_is_sorted() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -2.0, 5.0]));
        let eig = sym_eig(&m).unwrap();
        assert_eq!(eig.values.as_slice(), &[-2.0, 1.0, 5.0]);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = random_symmetric(6, &mut rng);
            let eig = sym_eig(&m).unwrap();
            assert!((eig.reconstruct() - &m).norm() < 1e-8);
            let vtv = eig.vectors.transpose() * &eig.vectors;
            assert!((vtv - DMatrix::identity(6, 6)).norm() < 1e-12);
            for i in 0..6 {
                let v = eig.vectors.column(i);
                let resid = &m * v - v * eig.values[i];
                assert!(resid.norm() <= 1e-8 * abs_sum(&m));
            }
            for w in eig.values.as_slice().windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(sym_eig(&m), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn hyperplane_basis_is_orthonormal_complement() {
        let w = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]);
        let b = hyperplane_basis(&w);
        assert_eq!(b.ncols(), 3);
        assert!((b.transpose() * &b - DMatrix::identity(3, 3)).norm() < 1e-14);
        assert!((w.transpose() * &b).norm() < 1e-14);
    }

    #[test]
    fn lyapunov_solution_satisfies_equation() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, -2.0, 2.0]);
        let q = solve_lyapunov(&a, &DMatrix::identity(2, 2)).unwrap();
        let resid = &q * &a + a.transpose() * &q - DMatrix::identity(2, 2);
        assert!(resid.norm() < 1e-12);
        assert!(lambda_min(&q).unwrap() > 0.0);
    }

    #[test]
    fn periodic_matrix_has_unit_radius() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!((spectral_radius(&p) - 1.0).abs() < 1e-12);
    }
}
