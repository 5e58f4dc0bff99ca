//! Orthogonal dynamics: orbit maps from Volterra solves, the independent
//! semigroup route to the fluctuating forces, and the verification battery
//! for the structural identities (Dyson identity, semigroup law, unitarity,
//! stationarity, growth bound).

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::error::{MgleError, Result};
use crate::hilbert::{InnerProductSpace, Vector};
use crate::linops::{self, GrowthBound, OperatorModel};
use crate::mori::{convolve_frames, ForceEnsemble, MoriProjection};
use crate::report::Check;
use crate::volterra::{self, Series, TimeGrid};

/// Orbit of the orthogonal dynamics for one initial value:
/// the scalar response f(x, t) and the orbit u(x, t).
#[derive(Debug, Clone)]
pub struct OrbitMap {
    pub x: Vector,
    pub grid: TimeGrid,
    pub f: Series,
    pub u: Vec<Vector>,
}

/// Producer of orbit maps for arbitrary initial values of one backend.
pub trait OrbitFactory {
    fn grid(&self) -> TimeGrid;
    fn orbit(&self, x: &Vector) -> Result<OrbitMap>;
}

/// Orbit map from precomputed frames `x_frames[k] = U(t_k) x` and
/// `z_frames[k] = U(t_k) z`:
/// f solves f(x,t) = (U(t)Qx, QL†z)(z,z)^{-1} - int_0^t f(x,t-s) h(s) ds,
/// u(x,t) = Px + U(t)Qx - int_0^t f(x,t-s) U(s)z ds.
pub fn orbit(
    p: &MoriProjection,
    x_frames: &[Vector],
    z_frames: &[Vector],
    qldagger_z: &Vector,
    grid: TimeGrid,
) -> Result<OrbitMap> {
    if x_frames.len() != grid.count || z_frames.len() != grid.count {
        return Err(MgleError::GridMismatch {
            detail: "frame count does not match grid".into(),
        });
    }
    let space = p.space();
    let zz = p.z_norm_sq();
    let x = x_frames[0].clone();
    let coeff = p.coefficient(&x)?;
    let px = p.z().mapv(|v| v * coeff);

    // U(t) Q x = U(t) x - coeff U(t) z by linearity.
    let qx_frames: Vec<Vector> = x_frames
        .iter()
        .zip(z_frames)
        .map(|(xf, zf)| xf - &zf.mapv(|v| v * coeff))
        .collect();

    let mut g = Vec::with_capacity(grid.count);
    let mut h = Vec::with_capacity(grid.count);
    for k in 0..grid.count {
        g.push(space.inner(&qx_frames[k], qldagger_z)? / zz);
        h.push(space.inner(&z_frames[k], qldagger_z)? / zz);
    }
    let f = volterra::solve_convolution(&Series::new(grid, g), &Series::new(grid, h))?;

    let conv = convolve_frames(&f, z_frames);
    let u = (0..grid.count)
        .map(|k| &px + &qx_frames[k] - &conv[k])
        .collect();
    Ok(OrbitMap { x, grid, f, u })
}

/// Matrix-backend orbit factory: shares the per-node propagators across
/// initial values.
pub struct MatrixOrbitFactory {
    projection: MoriProjection,
    propagators: Vec<Array2<Complex64>>,
    z_frames: Vec<Vector>,
    qldagger_z: Vector,
    grid: TimeGrid,
}

impl MatrixOrbitFactory {
    pub fn new(model: &OperatorModel, p: &MoriProjection, grid: TimeGrid) -> Result<Self> {
        let propagators = linops::propagator_matrices(model, grid)?;
        let z_frames: Vec<Vector> = propagators.iter().map(|u| u.dot(p.z())).collect();
        let qldagger_z = crate::mori::matrix_qldagger_z(model, p)?;
        Ok(Self {
            projection: p.clone(),
            propagators,
            z_frames,
            qldagger_z,
            grid,
        })
    }

    pub fn qldagger_z(&self) -> &Vector {
        &self.qldagger_z
    }
}

impl OrbitFactory for MatrixOrbitFactory {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn orbit(&self, x: &Vector) -> Result<OrbitMap> {
        let x_frames: Vec<Vector> = self.propagators.iter().map(|u| u.dot(x)).collect();
        orbit(
            &self.projection,
            &x_frames,
            &self.z_frames,
            &self.qldagger_z,
            self.grid,
        )
    }
}

/// Projection matrix P = z (z^H W) / (z^H W z) of a coordinate-space
/// Mori projection.
pub fn projection_matrix(p: &MoriProjection) -> Array2<Complex64> {
    let w = p.space().weight().expect("coordinate space");
    let z = p.z();
    let n = z.len();
    let wz = w.dot(z);
    let zz = p.z_norm_sq();
    Array2::from_shape_fn((n, n), |(i, j)| z[i] * wz[j].conj() / zz)
}

/// Orthogonal-complement generator Q L Q and perturbed generator L Q.
pub fn orthogonal_generators(
    model: &OperatorModel,
    p: &MoriProjection,
) -> (Array2<Complex64>, Array2<Complex64>) {
    let n = model.dim();
    let pm = projection_matrix(p);
    let q = Array2::from_diag_elem(n, Complex64::new(1.0, 0.0)) - &pm;
    let lq = model.matrix().dot(&q);
    let qlq = q.dot(&lq);
    (qlq, lq)
}

/// Fluctuating forces through the orthogonal dynamics semigroup:
/// eta_t = e^{QLQ t} Q L z, computed per node by independent matrix
/// exponentials. This route never touches the Volterra solver, so it can
/// be compared against the defining forces.
pub fn forces_via_orthogonal_dynamics(
    model: &OperatorModel,
    p: &MoriProjection,
    grid: TimeGrid,
) -> Result<ForceEnsemble> {
    let (qlq, _) = orthogonal_generators(model, p);
    let qlq_model = OperatorModel::new(model.space().clone(), qlq)?;
    let qlz = p.project_orthogonal(&model.apply(p.z()))?;
    let frames = (0..grid.count)
        .map(|k| Ok(qlq_model.expm_action(grid.node(k))?.dot(&qlz)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ForceEnsemble { grid, frames })
}

/// Dyson identity on the matrix backend:
/// e^{QLQ t} = P + Q e^{LQ t} at every grid node, measured in the weighted
/// operator norm and allowed to grow like e^{|omega| t} with the fitted
/// growth rate of the perturbed semigroup.
pub fn check_dyson(
    model: &OperatorModel,
    p: &MoriProjection,
    grid: TimeGrid,
    tol_base: f64,
) -> Result<Check> {
    let n = model.dim();
    let space = model.space();
    let (qlq, lq) = orthogonal_generators(model, p);
    let pm = projection_matrix(p);
    let q = Array2::from_diag_elem(n, Complex64::new(1.0, 0.0)) - &pm;
    let qlq_model = OperatorModel::new(space.clone(), qlq)?;
    let lq_model = OperatorModel::new(space.clone(), lq)?;
    let gb = lq_model.growth_bound(grid.t_max().max(grid.dt), grid.count.min(26))?;

    let mut worst = (0.0f64, 0usize);
    for k in 0..grid.count {
        let t = grid.node(k);
        let lhs = qlq_model.expm_action(t)?;
        let rhs = &pm + &q.dot(&lq_model.expm_action(t)?);
        let dev = linops::weighted_operator_norm(space, &(&lhs - &rhs));
        let scaled = dev / (gb.omega.abs() * t).exp();
        if scaled > worst.0 {
            worst = (scaled, k);
        }
    }
    Ok(Check::pass_fail("dyson", worst.0, tol_base)
        .at(format!("t = {:.6}", grid.node(worst.1))))
}

/// W-unitarity of the orthogonal dynamics for skew-adjoint generators:
/// G(t)^H W G(t) = W with G(t) = e^{QLQ t}.
pub fn check_unitarity(
    model: &OperatorModel,
    p: &MoriProjection,
    grid: TimeGrid,
    tol: f64,
) -> Result<Check> {
    if !model.is_skew_adjoint(1e-10) {
        return Ok(Check::not_applicable(
            "unitarity",
            "generator is not skew-adjoint",
        ));
    }
    let w = model.space().weight().expect("coordinate space").clone();
    let (qlq, _) = orthogonal_generators(model, p);
    let qlq_model = OperatorModel::new(model.space().clone(), qlq)?;
    let mut worst = (0.0f64, 0usize);
    for k in 0..grid.count {
        let g = qlq_model.expm_action(grid.node(k))?;
        let gh = crate::linalg::hermitian_transpose(&g);
        let dev = crate::linalg::spectral_norm(&(&gh.dot(&w).dot(&g) - &w));
        if dev > worst.0 {
            worst = (dev, k);
        }
    }
    Ok(Check::pass_fail("unitarity", worst.0, tol)
        .at(format!("t = {:.6}", grid.node(worst.1))))
}

/// Semigroup law of the orbit maps: u(x, t+s) = u(u(x,t), s).
pub fn check_semigroup(
    factory: &dyn OrbitFactory,
    x: &Vector,
    t: f64,
    s: f64,
    tol: f64,
) -> Result<Check> {
    let grid = factory.grid();
    let kt = grid.index_of(grid.t0 + t)?;
    let ks = grid.index_of(grid.t0 + s)?;
    let kts = grid.index_of(grid.t0 + t + s)?;

    let first = factory.orbit(x)?;
    let second = factory.orbit(&first.u[kt])?;
    let mut diff = 0.0f64;
    let space_dim = first.u[kts].len();
    let mut r: Vector = Array1::zeros(space_dim);
    for i in 0..space_dim {
        r[i] = first.u[kts][i] - second.u[ks][i];
    }
    // Norm in the orbit's own space comes from the factory's projection;
    // use the Euclidean norm if the projection space is unavailable.
    diff = diff.max(r.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt());
    Ok(Check::pass_fail("semigroup", diff, tol).at(format!("t = {t}, s = {s}")))
}

/// Deterministic (t, s, r) index triples for the stationarity check.
pub fn stationarity_triples(count: usize, how_many: usize) -> Vec<(usize, usize, usize)> {
    let mut state = 0x00c0ffeeu64;
    let mut next = move |bound: usize| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 33) as usize) % bound.max(1)
    };
    let half = (count / 2).max(1);
    (0..how_many)
        .map(|_| {
            let t = next(half);
            let s = next(half);
            let r = next(count - t.max(s));
            (t, s, r)
        })
        .collect()
}

/// Stationarity of the forces under a common shift:
/// (eta_{t+r}, eta_{s+r}) = (eta_t, eta_s), deviations normalized by (z,z).
pub fn check_stationarity(
    eta: &ForceEnsemble,
    space: &InnerProductSpace,
    z_norm_sq: f64,
    tol: f64,
) -> Result<Check> {
    let triples = stationarity_triples(eta.grid.count, 20);
    let mut worst = (0.0f64, (0usize, 0usize, 0usize));
    for &(t, s, r) in &triples {
        let shifted = space.inner(&eta.frames[t + r], &eta.frames[s + r])?;
        let base = space.inner(&eta.frames[t], &eta.frames[s])?;
        let dev = (shifted - base).norm() / z_norm_sq;
        if dev > worst.0 {
            worst = (dev, (t, s, r));
        }
    }
    let (t, s, r) = worst.1;
    Ok(Check::pass_fail("stationarity", worst.0, tol).at(format!(
        "(t, s, r) = ({:.6}, {:.6}, {:.6})",
        eta.grid.node(t),
        eta.grid.node(s),
        r as f64 * eta.grid.dt
    )))
}

/// Growth bound of the orbit map, from the Gronwall estimate:
/// ||u(x,t)|| <= (1 + M e^{w t}) ||x|| exp(t M e^{w t} ||L† z|| / ||z||),
/// with w clamped at zero so the envelope is monotone.
pub fn check_growth_bound(
    orbit: &OrbitMap,
    space: &InnerProductSpace,
    gb: GrowthBound,
    ldagger_z_norm: f64,
    z_norm: f64,
) -> Result<Check> {
    let omega = gb.omega.max(0.0);
    let x_norm = space.norm(&orbit.x)?;
    let mut worst = (0.0f64, 0usize);
    for k in 0..orbit.grid.count {
        let t = orbit.grid.node(k) - orbit.grid.t0;
        let env = gb.m * (omega * t).exp();
        let bound = (1.0 + env) * x_norm * (t * env * ldagger_z_norm / z_norm).exp();
        let ratio = space.norm(&orbit.u[k])? / bound.max(1e-300);
        if ratio > worst.0 {
            worst = (ratio, k);
        }
    }
    Ok(
        Check::pass_fail("growth-bound", worst.0, 1.0 + 1e-8)
            .at(format!("t = {:.6}", orbit.grid.node(worst.1))),
    )
}
