//! The rank-one Mori projection and the GLE assembly: drift, memory kernel,
//! fluctuating forces, and the residual verifiers for the GLE, the second
//! fluctuation-dissipation theorem and force orthogonality.
//!
//! All operations are backend-agnostic: they consume orbit frames
//! (U(t_k) z and U(t_k) L z as vectors of the underlying space), which the
//! matrix backend produces from matrix exponentials and the trajectory
//! backend from observables evaluated along sampled flows.

use ndarray::Array1;
use num_complex::Complex64;

use crate::error::{MgleError, Result};
use crate::hilbert::{InnerProductSpace, Vector};
use crate::linops::OperatorModel;
use crate::report::Check;
use crate::volterra::{self, Quadrature, Series, TimeGrid};

/// Rank-one orthogonal projection onto the span of the observable z.
#[derive(Debug, Clone)]
pub struct MoriProjection {
    space: InnerProductSpace,
    z: Vector,
    z_norm_sq: Complex64,
}

impl MoriProjection {
    pub fn new(space: InnerProductSpace, z: Vector) -> Result<Self> {
        let norm = space.norm(&z)?;
        if norm < 1e-12 {
            return Err(MgleError::DegenerateObservable { norm });
        }
        let z_norm_sq = space.inner(&z, &z)?;
        Ok(Self { space, z, z_norm_sq })
    }

    pub fn space(&self) -> &InnerProductSpace {
        &self.space
    }

    pub fn z(&self) -> &Vector {
        &self.z
    }

    /// inner(z, z); real and positive by construction.
    pub fn z_norm_sq(&self) -> Complex64 {
        self.z_norm_sq
    }

    /// inner(x, z) / inner(z, z), the coordinate of x along z.
    pub fn coefficient(&self, x: &Vector) -> Result<Complex64> {
        Ok(self.space.inner(x, &self.z)? / self.z_norm_sq)
    }

    /// P x = inner(x,z) inner(z,z)^{-1} z.
    pub fn project_parallel(&self, x: &Vector) -> Result<Vector> {
        let coeff = self.coefficient(x)?;
        Ok(self.z.mapv(|v| v * coeff))
    }

    /// Q x = x - P x.
    pub fn project_orthogonal(&self, x: &Vector) -> Result<Vector> {
        let par = self.project_parallel(x)?;
        Ok(x - &par)
    }
}

/// Orbit frames of the observable and its generator action on a grid:
/// `z[k] = U(t_k) z`, `lz[k] = U(t_k) L z`.
#[derive(Debug, Clone)]
pub struct OrbitData {
    pub grid: TimeGrid,
    pub z: Vec<Vector>,
    pub lz: Vec<Vector>,
}

/// Fluctuating-force frames on a grid.
#[derive(Debug, Clone)]
pub struct ForceEnsemble {
    pub grid: TimeGrid,
    pub frames: Vec<Vector>,
}

impl ForceEnsemble {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            frames: vec![Array1::zeros(dim); grid.count],
            grid,
        }
    }
}

/// Everything the GLE needs: drift, kernel, forces and the observable
/// autocorrelation, on one shared grid.
#[derive(Debug, Clone)]
pub struct GleIngredients {
    pub omega: Complex64,
    pub kernel: Series,
    pub eta: ForceEnsemble,
    pub correlation: Series,
}

/// Volterra input data for the kernel equation, plus drift and correlation.
#[derive(Debug, Clone)]
pub struct GleInputs {
    pub g: Series,
    pub h: Series,
    pub correlation: Series,
    pub omega: Complex64,
}

/// Assemble the scalar Volterra data from orbit frames:
/// g(t) = inner(U(t) Q L z, Q L† z) / (z,z),
/// h(s) = inner(U(s) z, Q L† z) / (z,z),
/// C(t) = inner(U(t) z, z),
/// omega = inner(L z, z) / (z,z).
pub fn gle_inputs(
    data: &OrbitData,
    p: &MoriProjection,
    qldagger_z: &Vector,
) -> Result<GleInputs> {
    if data.grid.t0.abs() > 1e-12 {
        return Err(MgleError::NonzeroOrigin { t0: data.grid.t0 });
    }
    let space = p.space();
    let zz = p.z_norm_sq();
    let omega = space.inner(&data.lz[0], p.z())? / zz;
    let n = data.grid.count;
    let mut g = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for k in 0..n {
        // U(t) Q L z = U(t) L z - omega U(t) z by linearity of U(t).
        let qlz_t = &data.lz[k] - &data.z[k].mapv(|v| v * omega);
        g.push(space.inner(&qlz_t, qldagger_z)? / zz);
        h.push(space.inner(&data.z[k], qldagger_z)? / zz);
        c.push(space.inner(&data.z[k], p.z())?);
    }
    Ok(GleInputs {
        g: Series::new(data.grid, g),
        h: Series::new(data.grid, h),
        correlation: Series::new(data.grid, c),
        omega,
    })
}

/// Matrix-backend orbit frames via per-node matrix exponentials.
pub fn matrix_orbit_data(model: &OperatorModel, z: &Vector, grid: TimeGrid) -> Result<OrbitData> {
    let props = crate::linops::propagator_matrices(model, grid)?;
    let lz = model.apply(z);
    let z_frames = props.iter().map(|u| u.dot(z)).collect();
    let lz_frames = props.iter().map(|u| u.dot(&lz)).collect();
    Ok(OrbitData {
        grid,
        z: z_frames,
        lz: lz_frames,
    })
}

/// Q L† z for a matrix model, the second-argument vector of the kernel data.
pub fn matrix_qldagger_z(model: &OperatorModel, p: &MoriProjection) -> Result<Vector> {
    let ldag_z = model.adjoint().apply(p.z());
    p.project_orthogonal(&ldag_z)
}

/// Volterra data for a matrix model on a grid (drift, g, h, correlation).
pub fn gle_inputs_matrix(
    model: &OperatorModel,
    p: &MoriProjection,
    grid: TimeGrid,
) -> Result<GleInputs> {
    let data = matrix_orbit_data(model, p.z(), grid)?;
    let qldagger_z = matrix_qldagger_z(model, p)?;
    gle_inputs(&data, p, &qldagger_z)
}

/// Memory kernel as the unique solution of the kernel Volterra equation.
pub fn extract_kernel(g: &Series, h: &Series) -> Result<Series> {
    volterra::solve_convolution(g, h)
}

/// Trapezoid convolution of a scalar kernel with vector frames; frame 0 is 0.
pub fn convolve_frames(kernel: &Series, frames: &[Vector]) -> Vec<Vector> {
    assert_eq!(kernel.len(), frames.len());
    let n = kernel.len();
    let dt = kernel.grid.dt;
    let dim = frames[0].len();
    let mut out = Vec::with_capacity(n);
    out.push(Array1::zeros(dim));
    for i in 1..n {
        let mut acc: Vector = &frames[0] * (kernel.values[i] * 0.5);
        acc = acc + &frames[i] * (kernel.values[0] * 0.5);
        for j in 1..i {
            acc = acc + &frames[j] * kernel.values[i - j];
        }
        out.push(acc * Complex64::new(dt, 0.0));
    }
    out
}

/// Fluctuating forces from the defining Volterra identity:
/// eta_t = U(t) Q L z - int_0^t K(t-s) U(s) z ds. Frame 0 equals Q L z.
pub fn fluctuating_forces(
    data: &OrbitData,
    p: &MoriProjection,
    kernel: &Series,
) -> Result<ForceEnsemble> {
    if kernel.grid != data.grid {
        return Err(MgleError::GridMismatch {
            detail: "kernel and orbit data grids differ".into(),
        });
    }
    let zz = p.z_norm_sq();
    let space = p.space();
    let omega = space.inner(&data.lz[0], p.z())? / zz;
    let conv = convolve_frames(kernel, &data.z);
    let frames = (0..data.grid.count)
        .map(|k| {
            let qlz_t = &data.lz[k] - &data.z[k].mapv(|v| v * omega);
            &qlz_t - &conv[k]
        })
        .collect();
    Ok(ForceEnsemble {
        grid: data.grid,
        frames,
    })
}

/// Full matrix-backend extraction: drift, kernel, forces, correlation.
pub fn matrix_gle_ingredients(
    model: &OperatorModel,
    p: &MoriProjection,
    grid: TimeGrid,
) -> Result<GleIngredients> {
    let data = matrix_orbit_data(model, p.z(), grid)?;
    let qldagger_z = matrix_qldagger_z(model, p)?;
    let inputs = gle_inputs(&data, p, &qldagger_z)?;
    let kernel = extract_kernel(&inputs.g, &inputs.h)?;
    let eta = fluctuating_forces(&data, p, &kernel)?;
    Ok(GleIngredients {
        omega: inputs.omega,
        kernel,
        eta,
        correlation: inputs.correlation,
    })
}

/// Per-node GLE residual norms plus the aggregated check.
#[derive(Debug, Clone)]
pub struct GleResidual {
    pub residuals: Vec<f64>,
    pub check: Check,
}

/// Residual of the GLE at every node, normalized by ||z||:
/// r(t) = U(t) L z - omega U(t) z - eta_t - int_0^t K(t-s) U(s) z ds,
/// with the derivative taken as exact generator action. The memory
/// integral quadrature is the caller's choice; pass `Simpson` to test
/// forces produced by the same trapezoid rule against an independent rule.
pub fn verify_gle(
    data: &OrbitData,
    p: &MoriProjection,
    omega: Complex64,
    kernel: &Series,
    eta: &ForceEnsemble,
    tol: f64,
    quad: Quadrature,
) -> Result<GleResidual> {
    let space = p.space();
    let z_norm = space.norm(p.z())?;
    let weights = |i: usize| volterra::quadrature_weights(quad, i);
    let n = data.grid.count;
    let dt = data.grid.dt;
    let mut residuals = Vec::with_capacity(n);
    let mut worst = (0.0f64, 0usize);
    for i in 0..n {
        let mut r = &data.lz[i] - &data.z[i].mapv(|v| v * omega) - &eta.frames[i];
        if i >= 1 {
            let w = weights(i);
            let mut conv: Vector = Array1::zeros(data.z[0].len());
            for j in 0..=i {
                conv = conv + &data.z[j] * (kernel.values[i - j] * w[j]);
            }
            r = r - conv * Complex64::new(dt, 0.0);
        }
        let norm = space.norm(&r)? / z_norm;
        if norm > worst.0 {
            worst = (norm, i);
        }
        residuals.push(norm);
    }
    let check = Check::pass_fail("gle", worst.0, tol).at(format!("t = {:.6}", data.grid.node(worst.1)));
    Ok(GleResidual { residuals, check })
}

/// Second fluctuation-dissipation theorem:
/// K(t) = inner(eta_t, Q L† z) / (z,z) at every node, and additionally
/// K(t) = -inner(eta_t, eta_0) / (z,z) when the generator is skew-adjoint.
pub fn verify_2fdt(
    eta: &ForceEnsemble,
    p: &MoriProjection,
    qldagger_z: &Vector,
    kernel: &Series,
    skew: bool,
    tol: f64,
) -> Result<Check> {
    let space = p.space();
    let zz = p.z_norm_sq();
    let mut worst = (0.0f64, 0usize);
    for k in 0..eta.grid.count {
        let rhs = space.inner(&eta.frames[k], qldagger_z)? / zz;
        let mut dev = (kernel.values[k] - rhs).norm();
        if skew {
            let rhs2 = -space.inner(&eta.frames[k], &eta.frames[0])? / zz;
            dev = dev.max((kernel.values[k] - rhs2).norm());
        }
        if dev > worst.0 {
            worst = (dev, k);
        }
    }
    Ok(Check::pass_fail("2fdt", worst.0, tol).at(format!("t = {:.6}", eta.grid.node(worst.1))))
}

/// Orthogonality of the forces: |inner(eta_t, z)| / (||eta_t|| ||z|| + eps).
pub fn verify_orthogonality(eta: &ForceEnsemble, p: &MoriProjection, tol: f64) -> Result<Check> {
    let space = p.space();
    let z_norm = space.norm(p.z())?;
    let mut worst = (0.0f64, 0usize);
    for k in 0..eta.grid.count {
        let ip = space.inner(&eta.frames[k], p.z())?.norm();
        let scale = space.norm(&eta.frames[k])? * z_norm + 1e-300;
        let dev = ip / scale;
        if dev > worst.0 {
            worst = (dev, k);
        }
    }
    Ok(Check::pass_fail("orthogonality", worst.0, tol)
        .at(format!("t = {:.6}", eta.grid.node(worst.1))))
}

/// Predicted autocorrelation from the closed memory equation
/// dC/dt = omega C + int_0^t K(t-s) C(s) ds, C(0) = C0, marched with the
/// implicit trapezoid rule.
pub fn memory_equation_predict(omega: Complex64, kernel: &Series, c0: Complex64) -> Result<Series> {
    let grid = kernel.grid;
    let dt = grid.dt;
    let half = 0.5 * dt;
    let n = grid.count;
    let k0 = kernel.values[0];
    let march = Complex64::new(1.0, 0.0) - omega * half - k0 * (half * dt * 0.5);
    if march.norm() < 1e-10 {
        return Err(MgleError::NearSingularMarch {
            factor_name: "1 - (dt/2) omega - (dt^2/4) K(0)",
            value: march.norm(),
        });
    }
    let mut c = vec![Complex64::new(0.0, 0.0); n];
    let mut f = vec![Complex64::new(0.0, 0.0); n];
    c[0] = c0;
    f[0] = omega * c0;
    for i in 1..n {
        // Known part of the memory integral at t_i (all terms except C_i).
        let mut mem = kernel.values[i] * c[0] * 0.5;
        for j in 1..i {
            mem += kernel.values[i - j] * c[j];
        }
        let rhs = c[i - 1] + f[i - 1] * half + mem * (half * dt);
        c[i] = rhs / march;
        f[i] = omega * c[i] + (mem + k0 * c[i] * 0.5) * dt;
    }
    Ok(Series::new(grid, c))
}
