//! Numerical realization of the Mori projection-operator formalism.
//!
//! The crate extracts generalized-Langevin-equation memory kernels and
//! fluctuating forces from linear Volterra equations, materializes the
//! orthogonal dynamics through orbit maps, and verifies the structural
//! identities of the formalism (GLE residual, second fluctuation-dissipation
//! theorem, orthogonality, Dyson identity, semigroup laws, growth bounds,
//! unitarity and stationarity) on two backends:
//!
//! * an exact weighted coordinate space driven by matrix generators, where
//!   the identities are checkable to machine or quadrature precision, and
//! * a sampled classical-mechanics trajectory ensemble, where the Koopman
//!   operator acts by composition and estimates carry Monte Carlo error.
//!
//! A non-autonomous pipeline covers evolution families with reversed
//! composition, time-dependent Mori projections and two-time memory kernels.

pub mod error;
pub mod cli;
pub mod ensemble_gle;
pub mod expm;
pub mod hilbert;
pub mod linalg;
pub mod linops;
pub mod mori;
pub mod nonstationary;
pub mod orthdyn;
pub mod report;
pub mod trajectory;
pub mod volterra;

pub use error::{MgleError, Result};
