//! Matrix exponential via scaling-and-squaring with a diagonal Padé(13)
//! approximant (Higham 2005). Sized for the small dense generators used
//! throughout this crate.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::Result;
use crate::linalg::{matrix_1_norm, solve};

/// Padé(13,13) numerator coefficients (Higham 2005, eq. 10.33).
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Scaling threshold theta_13 for the Padé(13) approximant.
const THETA13: f64 = 5.371920351148152;

fn c(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// exp(A) for a square complex matrix.
pub fn expm(a: &Array2<Complex64>) -> Array2<Complex64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm requires a square matrix");
    if n == 1 {
        let mut r = Array2::zeros((1, 1));
        r[[0, 0]] = a[[0, 0]].exp();
        return r;
    }

    let norm = matrix_1_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as u32
    } else {
        0
    };
    let scale = c(0.5f64.powi(s as i32));
    let a1 = a * scale;

    let eye = Array2::from_diag_elem(n, c(1.0));
    let a2 = a1.dot(&a1);
    let a4 = a2.dot(&a2);
    let a6 = a2.dot(&a4);

    let w1 = &a6 * c(PADE13[13]) + &a4 * c(PADE13[11]) + &a2 * c(PADE13[9]);
    let w2 = w1.dot(&a6)
        + &a6 * c(PADE13[7])
        + &a4 * c(PADE13[5])
        + &a2 * c(PADE13[3])
        + &eye * c(PADE13[1]);
    let u = a1.dot(&w2);

    let v1 = &a6 * c(PADE13[12]) + &a4 * c(PADE13[10]) + &a2 * c(PADE13[8]);
    let v = v1.dot(&a6)
        + &a6 * c(PADE13[6])
        + &a4 * c(PADE13[4])
        + &a2 * c(PADE13[2])
        + &eye * c(PADE13[0]);

    let num = &v + &u;
    let den = &v - &u;
    let mut r = solve(&den, &num).expect("Padé denominator is nonsingular in the scaled regime");

    for _ in 0..s {
        r = r.dot(&r);
    }
    r
}

/// Rough forward-error proxy for `expm`: rounding amplified through the
/// squaring phase. Used to refuse absurdly large arguments.
pub fn expm_error_estimate(a: &Array2<Complex64>) -> f64 {
    let norm = matrix_1_norm(a);
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil()
    } else {
        0.0
    };
    f64::EPSILON * 2.0f64.powf(s) * norm.max(1.0)
}

/// exp(A) with the accuracy guard from `expm_error_estimate`.
pub fn expm_checked(a: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let bound = expm_error_estimate(a);
    if bound > 1e-8 {
        return Err(crate::error::MgleError::ExpmAccuracy {
            bound,
            norm: matrix_1_norm(a),
        });
    }
    Ok(expm(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Independent oracle: truncated Taylor series, valid for small norms.
    fn expm_series(a: &Array2<Complex64>, terms: usize) -> Array2<Complex64> {
        let n = a.nrows();
        let mut acc = Array2::from_diag_elem(n, c(1.0));
        let mut term = Array2::from_diag_elem(n, c(1.0));
        for k in 1..=terms {
            term = term.dot(a) / c(k as f64);
            acc = acc + &term;
        }
        acc
    }

    #[test]
    fn zero_matrix_gives_identity() {
        let a = Array2::<Complex64>::zeros((3, 3));
        let e = expm(&a);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((e[[i, j]] - c(want)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn diagonal_matches_scalar_exponential() {
        let a = array![[c(-1.0), c(0.0)], [c(0.0), c(2.5)]];
        let e = expm(&a);
        assert!((e[[0, 0]].re - (-1.0f64).exp()).abs() < 1e-14);
        assert!((e[[1, 1]].re - 2.5f64.exp()).abs() < 1e-12 * 2.5f64.exp());
    }

    #[test]
    fn nilpotent_series_terminates() {
        let t = 3.7;
        let a = array![[c(0.0), c(t)], [c(0.0), c(0.0)]];
        let e = expm(&a);
        assert!((e[[0, 0]] - c(1.0)).norm() < 1e-14);
        assert!((e[[0, 1]] - c(t)).norm() < 1e-14);
        assert!((e[[1, 0]]).norm() < 1e-14);
        assert!((e[[1, 1]] - c(1.0)).norm() < 1e-14);
    }

    #[test]
    fn matches_series_oracle_on_random_matrix() {
        // Deterministic pseudo-random 5x5 with moderate norm.
        let n = 5;
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a = Array2::from_shape_fn((n, n), |_| Complex64::new(next(), next()) * 0.6);
        let e = expm(&a);
        let oracle = expm_series(&a, 40);
        let mut dev = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                dev = dev.max((e[[i, j]] - oracle[[i, j]]).norm());
            }
        }
        assert!(dev < 1e-13, "deviation from series oracle: {dev:.3e}");
    }

    #[test]
    fn large_norm_is_refused() {
        let a = Array2::from_diag_elem(2, c(1e7));
        assert!(expm_checked(&a).is_err());
        let b = Array2::from_diag_elem(2, c(40.0));
        assert!(expm_checked(&b).is_ok());
    }
}
