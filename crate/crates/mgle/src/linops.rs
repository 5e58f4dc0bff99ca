//! Finite-dimensional operator models: generators on a weighted coordinate
//! space, adjoints w.r.t. the weighted inner product, exponentials and
//! semigroup growth data.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{MgleError, Result};
use crate::expm;
use crate::hilbert::{InnerProductSpace, Vector};
use crate::linalg;

/// A square generator L acting on a coordinate space.
#[derive(Debug, Clone)]
pub struct OperatorModel {
    space: InnerProductSpace,
    l: Array2<Complex64>,
}

/// Certified pointwise bound ||e^{Lt}|| <= M e^{omega t} on a sample grid.
#[derive(Debug, Clone, Copy)]
pub struct GrowthBound {
    pub m: f64,
    pub omega: f64,
}

impl OperatorModel {
    pub fn new(space: InnerProductSpace, l: Array2<Complex64>) -> Result<Self> {
        if !space.is_coordinate() {
            return Err(MgleError::Config(
                "operator models require a coordinate space".into(),
            ));
        }
        if l.nrows() != l.ncols() || l.nrows() != space.dim() {
            return Err(MgleError::DimensionMismatch {
                expected: space.dim(),
                found: l.nrows(),
            });
        }
        Ok(Self { space, l })
    }

    pub fn space(&self) -> &InnerProductSpace {
        &self.space
    }

    pub fn matrix(&self) -> &Array2<Complex64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        self.l.dot(x)
    }

    /// Adjoint w.r.t. the weighted inner product: A† = W^{-1} A^H W,
    /// the unique matrix with inner(Ax, y) = inner(x, A†y).
    pub fn adjoint(&self) -> Self {
        let w = self.space.weight().expect("coordinate space");
        let ah = linalg::hermitian_transpose(&self.l);
        let ahw = ah.dot(w);
        let adj = linalg::solve(w, &ahw).expect("weight is positive definite");
        Self {
            space: self.space.clone(),
            l: adj,
        }
    }

    /// e^{Lt}, with an accuracy guard on ||Lt||.
    pub fn expm_action(&self, t: f64) -> Result<Array2<Complex64>> {
        assert!(t.is_finite(), "time must be finite");
        let a = &self.l * Complex64::new(t, 0.0);
        expm::expm_checked(&a)
    }

    /// Operator norm induced by the weighted inner product: the largest
    /// singular value after congruence with the Cholesky factor of W.
    pub fn weighted_operator_norm(&self, a: &Array2<Complex64>) -> f64 {
        weighted_operator_norm(&self.space, a)
    }

    /// True iff ||L + L†|| <= tol * (||L|| + 1) in the weighted operator norm.
    pub fn is_skew_adjoint(&self, tol: f64) -> bool {
        assert!(tol > 0.0);
        let adj = self.adjoint();
        let sum = &self.l + &adj.l;
        let lhs = self.weighted_operator_norm(&sum);
        let scale = self.weighted_operator_norm(&self.l) + 1.0;
        lhs <= tol * scale
    }

    /// Fit (M, omega) with ||e^{Lt}|| <= M e^{omega t} certified at the
    /// sampled times. omega is the maximal slope of the sampled log-norms,
    /// M the maximal residual multiplier (at least 1).
    pub fn growth_bound(&self, horizon: f64, samples: usize) -> Result<GrowthBound> {
        assert!(horizon > 0.0, "horizon must be positive");
        assert!(samples >= 2, "need at least two samples");
        let dt = horizon / (samples - 1) as f64;
        let mut times = Vec::with_capacity(samples);
        let mut norms = Vec::with_capacity(samples);
        for k in 0..samples {
            let t = k as f64 * dt;
            let e = self.expm_action(t)?;
            times.push(t);
            norms.push(self.weighted_operator_norm(&e).max(1e-300));
        }
        let mut omega = f64::NEG_INFINITY;
        for k in 1..samples {
            let slope = (norms[k].ln() - norms[k - 1].ln()) / (times[k] - times[k - 1]);
            omega = omega.max(slope);
        }
        if !omega.is_finite() {
            omega = 0.0;
        }
        let mut m = 1.0f64;
        for k in 0..samples {
            m = m.max(norms[k] * (-omega * times[k]).exp());
        }
        let gb = GrowthBound { m, omega };
        for k in 0..samples {
            debug_assert!(
                norms[k] <= gb.m * (gb.omega * times[k]).exp() * (1.0 + 1e-10),
                "fitted growth bound violated at t = {}",
                times[k]
            );
        }
        Ok(gb)
    }
}

/// Matrices e^{L t_k} at every grid node, each from an independent
/// scaling-and-squaring evaluation (no step-multiplication error buildup).
pub fn propagator_matrices(
    model: &OperatorModel,
    grid: crate::volterra::TimeGrid,
) -> Result<Vec<Array2<Complex64>>> {
    let n = model.dim();
    if grid.count.saturating_mul(n * n) > 200_000_000 {
        return Err(MgleError::GridTooLarge {
            count: grid.count,
            cap: 200_000_000 / (n * n),
        });
    }
    (0..grid.count)
        .map(|k| model.expm_action(grid.node(k)))
        .collect()
}

/// Operator norm of `a` in the metric of `space` (largest singular value of
/// T A T^{-1} where W = T^H T).
pub fn weighted_operator_norm(space: &InnerProductSpace, a: &Array2<Complex64>) -> f64 {
    let n = space.dim();
    assert_eq!(a.nrows(), n);
    let chol = space.cholesky_factor().expect("coordinate space");
    // T = L^H (upper triangular), ||x||_W = ||T x||_2.
    let t = linalg::hermitian_transpose(chol);
    let is_identity = {
        let mut id = true;
        'outer: for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                if (t[[i, j]] - Complex64::new(want, 0.0)).norm() > 0.0 {
                    id = false;
                    break 'outer;
                }
            }
        }
        id
    };
    if is_identity {
        return linalg::spectral_norm(a);
    }
    let ta = t.dot(a);
    // B = T A T^{-1}: solve B T = T A row-wise via the triangular factor.
    let tt = t.t().to_owned();
    let mut b = Array2::<Complex64>::zeros((n, n));
    for i in 0..n {
        // Row i of B solves T^T (row)^T = (T A)[i, :]^T; T upper => T^T lower.
        let rhs = Array1::from_iter(ta.row(i).iter().cloned());
        let row = linalg::solve_lower(&tt, &rhs);
        for j in 0..n {
            b[[i, j]] = row[j];
        }
    }
    linalg::spectral_norm(&b)
}
