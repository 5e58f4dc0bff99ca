//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum MgleError {
    #[error("dimension mismatch: expected length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("weight matrix is not Hermitian: max |W - W^H| entry = {deviation:.3e}")]
    NotHermitian { deviation: f64 },

    #[error("matrix is not positive definite: pivot {pivot:.3e} at index {index}")]
    NotPositiveDefinite { pivot: f64, index: usize },

    #[error("ensemble weights must be nonnegative and sum to 1: sum = {sum}")]
    BadWeights { sum: f64 },

    #[error("inner product produced a non-finite or negative-norm value: {detail}")]
    InternalConsistency { detail: String },

    #[error("time grids do not match: {detail}")]
    GridMismatch { detail: String },

    #[error("grid must start at t0 = 0 for this operation (got t0 = {t0})")]
    NonzeroOrigin { t0: f64 },

    #[error(
        "near-singular Volterra march: |{factor_name}| = {value:.3e} < 1e-10; reduce dt"
    )]
    NearSingularMarch { factor_name: &'static str, value: f64 },

    #[error("matrix exponential accuracy bound {bound:.3e} exceeds 1e-8 (||Lt||_1 = {norm:.3e}); split the time step")]
    ExpmAccuracy { bound: f64, norm: f64 },

    #[error("observable of interest is degenerate: ||z|| = {norm:.3e} < 1e-12")]
    DegenerateObservable { norm: f64 },

    #[error("non-finite state in sample {sample} at t = {time}")]
    NonFiniteState { sample: usize, time: f64 },

    #[error("non-finite observable value at sample {sample}")]
    NonFiniteObservable { sample: usize },

    #[error("observable gradient unavailable and finite-difference fallback disabled")]
    MissingGradient,

    #[error("gradient check failed: max relative deviation {deviation:.3e} > 1e-4 at probe {probe}")]
    GradientCheck { deviation: f64, probe: usize },

    #[error("time {t} is not a grid node (nearest node {nearest})")]
    OffGrid { t: f64, nearest: f64 },

    #[error("grid too large for the evolution-family backend: {count} nodes > {cap}")]
    GridTooLarge { count: usize, cap: usize },

    #[error("degenerate time-dependent norm: (z,z)_t = {value:.3e} at node {node}")]
    DegenerateMetric { value: f64, node: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing input artifact: {0}")]
    MissingArtifact(String),

    #[error("output directory is locked by another run: {0}")]
    Locked(String),

    #[error("bad trajectory dump: {0}")]
    BadDump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MgleError>;
