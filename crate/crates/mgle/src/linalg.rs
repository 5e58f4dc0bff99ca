//! Dense complex linear algebra helpers for small matrices.
//!
//! Everything here is written for the n <= a-few-hundred regime the rest of
//! the crate operates in; no blocking, no external LAPACK.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{MgleError, Result};

/// 1-norm (maximum absolute column sum).
pub fn matrix_1_norm(a: &Array2<Complex64>) -> f64 {
    let (n, m) = a.dim();
    let mut best = 0.0f64;
    for j in 0..m {
        let mut col = 0.0;
        for i in 0..n {
            col += a[[i, j]].norm();
        }
        best = best.max(col);
    }
    best
}

/// Conjugate transpose.
pub fn hermitian_transpose(a: &Array2<Complex64>) -> Array2<Complex64> {
    let (n, m) = a.dim();
    Array2::from_shape_fn((m, n), |(i, j)| a[[j, i]].conj())
}

/// Solve A X = B by Gaussian elimination with partial pivoting.
pub fn solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "solve requires a square matrix");
    assert_eq!(n, b.nrows(), "right-hand side has wrong row count");
    let m = b.ncols();

    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut max_val = 0.0;
        let mut max_row = col;
        for row in col..n {
            let v = lu[[row, col]].norm();
            if v > max_val {
                max_val = v;
                max_row = row;
            }
        }
        if max_val < 1e-300 {
            return Err(MgleError::InternalConsistency {
                detail: format!("singular matrix in solve (pivot column {col})"),
            });
        }
        if max_row != col {
            for j in 0..n {
                lu.swap([col, j], [max_row, j]);
            }
            for j in 0..m {
                x.swap([col, j], [max_row, j]);
            }
        }
        let pivot = lu[[col, col]];
        for row in (col + 1)..n {
            let factor = lu[[row, col]] / pivot;
            if factor.norm() == 0.0 {
                continue;
            }
            for j in (col + 1)..n {
                let v = lu[[col, j]];
                lu[[row, j]] -= factor * v;
            }
            for j in 0..m {
                let v = x[[col, j]];
                x[[row, j]] -= factor * v;
            }
        }
    }

    for col in (0..n).rev() {
        let pivot = lu[[col, col]];
        for j in 0..m {
            let mut sum = x[[col, j]];
            for k in (col + 1)..n {
                sum -= lu[[col, k]] * x[[k, j]];
            }
            x[[col, j]] = sum / pivot;
        }
    }
    Ok(x)
}

/// Cholesky factorization W = L L^H of a Hermitian positive-definite matrix.
/// Returns the lower-triangular factor L; fails on a non-positive pivot.
pub fn cholesky(w: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = w.nrows();
    assert_eq!(n, w.ncols());
    let mut l = Array2::<Complex64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = w[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]].conj();
            }
            if i == j {
                let pivot = sum.re;
                if pivot <= 0.0 || sum.im.abs() > 1e-12 * (1.0 + pivot.abs()) {
                    return Err(MgleError::NotPositiveDefinite { pivot, index: i });
                }
                l[[i, j]] = Complex64::new(pivot.sqrt(), 0.0);
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Cholesky factorization of a real symmetric positive-definite matrix.
pub fn cholesky_real(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(MgleError::NotPositiveDefinite { pivot: sum, index: i });
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Forward substitution with a lower-triangular matrix: solve L y = b.
pub fn solve_lower(l: &Array2<Complex64>, b: &Array1<Complex64>) -> Array1<Complex64> {
    let n = l.nrows();
    let mut y = Array1::<Complex64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    y
}

/// Back substitution with an upper-triangular matrix: solve U y = b.
pub fn solve_upper(u: &Array2<Complex64>, b: &Array1<Complex64>) -> Array1<Complex64> {
    let n = u.nrows();
    let mut y = Array1::<Complex64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in (i + 1)..n {
            sum -= u[[i, k]] * y[k];
        }
        y[i] = sum / u[[i, i]];
    }
    y
}

/// Eigenvalues of a Hermitian matrix by cyclic Jacobi rotations.
///
/// Quadratically convergent for the small matrices used here. Off-diagonal
/// mass below `n^2 * 1e-14 * scale` terminates the sweep loop.
pub fn hermitian_eigenvalues(a: &Array2<Complex64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if n == 1 {
        return vec![a[[0, 0]].re];
    }
    let mut m = a.clone();
    let scale = matrix_1_norm(&m).max(1e-300);
    let tol = 1e-15 * scale;

    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]].norm();
            }
        }
        if off < tol * (n * n) as f64 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.norm() <= tol {
                    continue;
                }
                // Unitary rotation in the (p,q) plane annihilating m[p][q].
                let app = m[[p, p]].re;
                let aqq = m[[q, q]].re;
                let abs_apq = apq.norm();
                let phase = apq / abs_apq;
                let theta = (aqq - app) / (2.0 * abs_apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Columns: v_p' = c v_p - s conj(phase) v_q ; v_q' = s phase v_p + c v_q
                for i in 0..n {
                    let mip = m[[i, p]];
                    let miq = m[[i, q]];
                    m[[i, p]] = mip * c - miq * s * phase.conj();
                    m[[i, q]] = mip * s * phase + miq * c;
                }
                for j in 0..n {
                    let mpj = m[[p, j]];
                    let mqj = m[[q, j]];
                    m[[p, j]] = mpj * c - mqj * s * phase;
                    m[[q, j]] = mpj * s * phase.conj() + mqj * c;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]].re).collect()
}

/// Largest singular value via the Hermitian eigenproblem for A^H A.
pub fn spectral_norm(a: &Array2<Complex64>) -> f64 {
    let ah = hermitian_transpose(a);
    let aha = ah.dot(a);
    hermitian_eigenvalues(&aha)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}
