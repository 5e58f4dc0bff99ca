//! Inner-product spaces with two concrete backends: an exact weighted
//! coordinate space and a weighted sample ensemble approximating L2(P).
//!
//! Real observables are stored as complex values with zero imaginary part,
//! so a single code path serves both the skew-adjoint and the general case.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{MgleError, Result};
use crate::linalg;

/// Element of a space: one complex value per coordinate (coordinate backend)
/// or per sample (ensemble backend).
pub type Vector = Array1<Complex64>;

#[derive(Debug, Clone)]
enum Backend {
    /// Weighted coordinate space; `weight` is Hermitian positive-definite,
    /// `chol` its lower Cholesky factor (weight = chol * chol^H).
    Coordinate {
        weight: Array2<Complex64>,
        chol: Array2<Complex64>,
    },
    /// Weighted ensemble; nonnegative weights summing to one.
    Ensemble { weights: Vec<f64> },
}

/// A finite inner-product space. Immutable after construction.
#[derive(Debug, Clone)]
pub struct InnerProductSpace {
    dim: usize,
    backend: Backend,
}

impl InnerProductSpace {
    /// Weighted coordinate space. The weight must be Hermitian within 1e-12
    /// entrywise and positive definite (checked by Cholesky factorization).
    pub fn coordinate(weight: Array2<Complex64>) -> Result<Self> {
        let n = weight.nrows();
        if weight.ncols() != n || n == 0 {
            return Err(MgleError::DimensionMismatch {
                expected: n,
                found: weight.ncols(),
            });
        }
        let mut dev = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                dev = dev.max((weight[[i, j]] - weight[[j, i]].conj()).norm());
            }
        }
        if dev > 1e-12 * (1.0 + linalg::matrix_1_norm(&weight)) {
            return Err(MgleError::NotHermitian { deviation: dev });
        }
        let chol = linalg::cholesky(&weight)?;
        Ok(Self {
            dim: n,
            backend: Backend::Coordinate { weight, chol },
        })
    }

    /// Coordinate space with the identity weight.
    pub fn coordinate_euclidean(dim: usize) -> Self {
        let eye = Array2::from_diag_elem(dim, Complex64::new(1.0, 0.0));
        Self::coordinate(eye).expect("identity weight is positive definite")
    }

    /// Ensemble space with explicit weights (must sum to 1 within 1e-12).
    pub fn ensemble(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(MgleError::BadWeights { sum });
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MgleError::BadWeights { sum });
        }
        Ok(Self {
            dim: weights.len(),
            backend: Backend::Ensemble { weights },
        })
    }

    /// Ensemble space with uniform weights 1/N (direct sampling).
    pub fn ensemble_uniform(count: usize) -> Self {
        assert!(count > 0, "ensemble needs at least one sample");
        let w = 1.0 / count as f64;
        Self {
            dim: count,
            backend: Backend::Ensemble {
                weights: vec![w; count],
            },
        }
    }

    /// Coordinate dimension or sample count.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_coordinate(&self) -> bool {
        matches!(self.backend, Backend::Coordinate { .. })
    }

    /// Weight matrix of a coordinate space.
    pub fn weight(&self) -> Option<&Array2<Complex64>> {
        match &self.backend {
            Backend::Coordinate { weight, .. } => Some(weight),
            Backend::Ensemble { .. } => None,
        }
    }

    /// Lower Cholesky factor of the weight (coordinate backend).
    pub fn cholesky_factor(&self) -> Option<&Array2<Complex64>> {
        match &self.backend {
            Backend::Coordinate { chol, .. } => Some(chol),
            Backend::Ensemble { .. } => None,
        }
    }

    /// Ensemble weights (ensemble backend).
    pub fn weights(&self) -> Option<&[f64]> {
        match &self.backend {
            Backend::Ensemble { weights } => Some(weights),
            Backend::Coordinate { .. } => None,
        }
    }

    fn check_len(&self, v: &Vector) -> Result<()> {
        if v.len() != self.dim {
            return Err(MgleError::DimensionMismatch {
                expected: self.dim,
                found: v.len(),
            });
        }
        Ok(())
    }

    /// Scalar product with complex conjugation in the second argument.
    ///
    /// Coordinate backend: y^H W x. Ensemble backend: sum_i w_i x_i conj(y_i).
    pub fn inner(&self, x: &Vector, y: &Vector) -> Result<Complex64> {
        self.check_len(x)?;
        self.check_len(y)?;
        let value = match &self.backend {
            Backend::Coordinate { weight, .. } => {
                let wx = weight.dot(x);
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.dim {
                    acc += y[i].conj() * wx[i];
                }
                acc
            }
            Backend::Ensemble { weights } => {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..self.dim {
                    acc += weights[i] * x[i] * y[i].conj();
                }
                acc
            }
        };
        if !value.re.is_finite() || !value.im.is_finite() {
            return Err(MgleError::InternalConsistency {
                detail: format!("inner product is not finite: {value}"),
            });
        }
        Ok(value)
    }

    /// Norm induced by the inner product.
    pub fn norm(&self, x: &Vector) -> Result<f64> {
        let sq = self.inner(x, x)?;
        let scale = x.iter().map(|v| v.norm_sqr()).sum::<f64>().max(1.0);
        if sq.re < -1e-12 * scale {
            return Err(MgleError::InternalConsistency {
                detail: format!("negative squared norm {:.3e}", sq.re),
            });
        }
        Ok(sq.re.max(0.0).sqrt())
    }
}
