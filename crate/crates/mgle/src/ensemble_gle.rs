//! GLE extraction on sampled trajectory ensembles.
//!
//! For large ensembles the generic frame-based route in `mori` is too
//! memory-hungry (it materializes one N-vector per grid node per observable).
//! This module stores observable values sample-major, streams the two
//! reduction passes over fixed-size chunks, and folds chunk partials in
//! index order, so results are bit-identical regardless of worker count.
//!
//! The pipeline assumes a measure-preserving flow (div(rho F) = 0), for
//! which the generator is skew-adjoint and Q L† z = -Q L z.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{MgleError, Result};
use crate::mori::GleInputs;
use crate::report::Check;
use crate::trajectory::{apply_generator, ObservableSpec, SystemSpec, TrajectoryEnsemble};
use crate::volterra::{self, Series, TimeGrid};

const CHUNK: usize = 4096;

/// Observable values along the ensemble, sample-major: `values[i * count + k]`
/// is the observable at phi_{t_k}(X_i).
pub struct ObsTable {
    pub n_samples: usize,
    pub count: usize,
    values: Vec<Complex64>,
}

impl ObsTable {
    pub fn evaluate(ens: &TrajectoryEnsemble, obs: &ObservableSpec) -> Result<Self> {
        let count = ens.grid.count;
        let n = ens.n_samples;
        let mut values = vec![Complex64::new(0.0, 0.0); n * count];
        values
            .par_chunks_mut(count)
            .enumerate()
            .try_for_each(|(i, row)| {
                for (k, slot) in row.iter_mut().enumerate() {
                    let v = obs.value(ens.state(i, k));
                    if !v.re.is_finite() || !v.im.is_finite() {
                        return Err(MgleError::NonFiniteObservable { sample: i });
                    }
                    *slot = v;
                }
                Ok(())
            })?;
        Ok(Self {
            n_samples: n,
            count,
            values,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.values[i * self.count..(i + 1) * self.count]
    }
}

/// Kernel extraction pipeline over one sampled ensemble.
pub struct EnsemblePipeline {
    pub grid: TimeGrid,
    pub n_samples: usize,
    z: ObsTable,
    lz: ObsTable,
    /// Ensemble estimate of (z, z).
    pub z_norm_sq: f64,
    /// Ensemble estimate of (L z, L z), for drift-scale normalization.
    pub lz_norm_sq: f64,
    pub inputs: GleInputs,
    pub kernel: Series,
}

impl EnsemblePipeline {
    /// Evaluate z and Lz along the ensemble, estimate the Volterra data and
    /// solve for the memory kernel.
    pub fn new(ens: &TrajectoryEnsemble, spec: &SystemSpec) -> Result<Self> {
        if ens.grid.t0.abs() > 1e-12 {
            return Err(MgleError::NonzeroOrigin { t0: ens.grid.t0 });
        }
        let z = ObsTable::evaluate(ens, &spec.observable)?;
        let lz_obs = apply_generator(spec, &spec.observable);
        let lz = ObsTable::evaluate(ens, &lz_obs)?;
        Self::from_tables(ens.grid, z, lz)
    }

    /// Pipeline from precomputed tables (exposed for tests and the CLI).
    pub fn from_tables(grid: TimeGrid, z: ObsTable, lz: ObsTable) -> Result<Self> {
        let n = z.n_samples;
        let count = grid.count;
        let inv_n = 1.0 / n as f64;

        // Drift and normalization from the t = 0 column.
        let mut zz = Complex64::new(0.0, 0.0);
        let mut lz_z = Complex64::new(0.0, 0.0);
        let mut lz_lz = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let z0 = z.row(i)[0];
            let l0 = lz.row(i)[0];
            zz += z0 * z0.conj() * inv_n;
            lz_z += l0 * z0.conj() * inv_n;
            lz_lz += l0 * l0.conj() * inv_n;
        }
        if zz.re < 1e-24 {
            return Err(MgleError::DegenerateObservable { norm: zz.re.sqrt() });
        }
        let omega = lz_z / zz;

        // Pass 1: per-node sums of (U(t) Q L z, w), (U(t) z, w), (U(t) z, z)
        // with w = Q L z at t = 0; chunked with a fixed fold order.
        let n_chunks = n.div_ceil(CHUNK);
        let partials: Vec<(Vec<Complex64>, Vec<Complex64>, Vec<Complex64>)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(n);
                let mut sg = vec![Complex64::new(0.0, 0.0); count];
                let mut sh = vec![Complex64::new(0.0, 0.0); count];
                let mut sc = vec![Complex64::new(0.0, 0.0); count];
                for i in lo..hi {
                    let zr = z.row(i);
                    let lr = lz.row(i);
                    let w = (lr[0] - omega * zr[0]).conj();
                    let z0 = zr[0].conj();
                    for k in 0..count {
                        let qlz_t = lr[k] - omega * zr[k];
                        sg[k] += qlz_t * w;
                        sh[k] += zr[k] * w;
                        sc[k] += zr[k] * z0;
                    }
                }
                (sg, sh, sc)
            })
            .collect();

        let mut g = vec![Complex64::new(0.0, 0.0); count];
        let mut h = vec![Complex64::new(0.0, 0.0); count];
        let mut c = vec![Complex64::new(0.0, 0.0); count];
        for (sg, sh, sc) in &partials {
            for k in 0..count {
                g[k] += sg[k];
                h[k] += sh[k];
                c[k] += sc[k];
            }
        }
        // Q L† z = -Q L z for the measure-preserving case.
        let scale = -inv_n / zz.re;
        for k in 0..count {
            g[k] *= scale;
            h[k] *= scale;
            c[k] *= inv_n;
        }

        let inputs = GleInputs {
            g: Series::new(grid, g),
            h: Series::new(grid, h),
            correlation: Series::new(grid, c),
            omega,
        };
        let kernel = volterra::solve_convolution(&inputs.g, &inputs.h)?;
        Ok(Self {
            grid,
            n_samples: n,
            z,
            lz,
            z_norm_sq: zz.re,
            lz_norm_sq: lz_lz.re,
            inputs,
            kernel,
        })
    }

    pub fn omega(&self) -> Complex64 {
        self.inputs.omega
    }

    /// Fluctuating-force values for one sample at the requested nodes:
    /// eta_t(i) = (U(t) Q L z)(i) - [trapezoid sum of K(t-s) (U(s) z)(i)].
    fn eta_row(&self, i: usize, nodes: &[usize], out: &mut [Complex64]) {
        let zr = self.z.row(i);
        let lr = self.lz.row(i);
        let omega = self.inputs.omega;
        let dt = self.grid.dt;
        let kv = &self.kernel.values;
        for (slot, &a) in out.iter_mut().zip(nodes) {
            let qlz_t = lr[a] - omega * zr[a];
            let mut conv = Complex64::new(0.0, 0.0);
            if a >= 1 {
                conv += kv[a] * zr[0] * 0.5;
                conv += kv[0] * zr[a] * 0.5;
                for j in 1..a {
                    conv += kv[a - j] * zr[j];
                }
                conv *= dt;
            }
            *slot = qlz_t - conv;
        }
    }

    /// Pass 2: ensemble Gram data of the forces at the given nodes,
    /// plus their overlaps with the observable.
    pub fn force_grams(&self, nodes: &[usize]) -> ForceGrams {
        let m = nodes.len();
        let n = self.n_samples;
        let inv_n = 1.0 / n as f64;
        let n_chunks = n.div_ceil(CHUNK);
        let partials: Vec<(Vec<Complex64>, Vec<Complex64>)> = (0..n_chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * CHUNK;
                let hi = ((c + 1) * CHUNK).min(n);
                let mut gram = vec![Complex64::new(0.0, 0.0); m * m];
                let mut eta_z = vec![Complex64::new(0.0, 0.0); m];
                let mut row = vec![Complex64::new(0.0, 0.0); m];
                for i in lo..hi {
                    self.eta_row(i, nodes, &mut row);
                    let z0 = self.z.row(i)[0].conj();
                    for a in 0..m {
                        eta_z[a] += row[a] * z0;
                        for b in 0..=a {
                            gram[a * m + b] += row[a] * row[b].conj();
                        }
                    }
                }
                (gram, eta_z)
            })
            .collect();

        let mut gram = vec![Complex64::new(0.0, 0.0); m * m];
        let mut eta_z = vec![Complex64::new(0.0, 0.0); m];
        for (pg, pz) in &partials {
            for idx in 0..m * m {
                gram[idx] += pg[idx];
            }
            for a in 0..m {
                eta_z[a] += pz[a];
            }
        }
        for idx in 0..m * m {
            gram[idx] *= inv_n;
        }
        for a in 0..m {
            eta_z[a] *= inv_n;
        }
        for a in 0..m {
            for b in (a + 1)..m {
                gram[a * m + b] = gram[b * m + a].conj();
            }
        }
        ForceGrams {
            nodes: nodes.to_vec(),
            m,
            gram,
            eta_z,
        }
    }

    /// Evenly strided node subset always containing node 0, for the
    /// force-statistics pass.
    pub fn checked_nodes(&self, max_nodes: usize) -> Vec<usize> {
        let count = self.grid.count;
        let stride = count.div_ceil(max_nodes).max(1);
        (0..count).step_by(stride).collect()
    }
}

/// Ensemble inner products of force frames at a node subset.
pub struct ForceGrams {
    pub nodes: Vec<usize>,
    m: usize,
    gram: Vec<Complex64>,
    eta_z: Vec<Complex64>,
}

impl ForceGrams {
    /// (eta_{t_a}, eta_{t_b}) for positions a, b in the node list.
    pub fn pair(&self, a: usize, b: usize) -> Complex64 {
        self.gram[a * self.m + b]
    }

    pub fn eta_norm(&self, a: usize) -> f64 {
        self.pair(a, a).re.max(0.0).sqrt()
    }

    pub fn eta_z(&self, a: usize) -> Complex64 {
        self.eta_z[a]
    }
}

/// Skew-case 2FDT on the ensemble: K(t) = -(eta_t, eta_0) / (z,z) at every
/// checked node. Deviations are measured relative to `scale`.
pub fn check_fdt(
    pipeline: &EnsemblePipeline,
    grams: &ForceGrams,
    tol: f64,
    scale: f64,
) -> Check {
    let zz = pipeline.z_norm_sq;
    let mut worst = (0.0f64, 0usize);
    for (a, &node) in grams.nodes.iter().enumerate() {
        let rhs = -grams.pair(a, 0) / zz;
        let dev = (pipeline.kernel.values[node] - rhs).norm() / scale;
        if dev > worst.0 {
            worst = (dev, node);
        }
    }
    Check::pass_fail("2fdt", worst.0, tol).at(format!("t = {:.6}", pipeline.grid.node(worst.1)))
}

/// Orthogonality on the ensemble: |(eta_t, z)| / (||eta_t|| ||z|| + eps).
pub fn check_orthogonality(pipeline: &EnsemblePipeline, grams: &ForceGrams, tol: f64) -> Check {
    let z_norm = pipeline.z_norm_sq.sqrt();
    let mut worst = (0.0f64, 0usize);
    for (a, &node) in grams.nodes.iter().enumerate() {
        let dev = grams.eta_z(a).norm() / (grams.eta_norm(a) * z_norm + 1e-300);
        if dev > worst.0 {
            worst = (dev, node);
        }
    }
    Check::pass_fail("orthogonality", worst.0, tol)
        .at(format!("t = {:.6}", pipeline.grid.node(worst.1)))
}

/// Stationarity over deterministic (t, s, r) position triples within the
/// checked node set (which is evenly strided, so shifted nodes stay inside).
pub fn check_stationarity(
    pipeline: &EnsemblePipeline,
    grams: &ForceGrams,
    tol: f64,
) -> Check {
    let m = grams.nodes.len();
    let triples = crate::orthdyn::stationarity_triples(m, 20);
    let zz = pipeline.z_norm_sq;
    let mut worst = (0.0f64, (0usize, 0usize, 0usize));
    for &(a, b, c) in &triples {
        let shifted = grams.pair(a + c, b + c);
        let base = grams.pair(a, b);
        let dev = (shifted - base).norm() / zz;
        if dev > worst.0 {
            worst = (dev, (a, b, c));
        }
    }
    let (a, b, c) = worst.1;
    Check::pass_fail("stationarity", worst.0, tol).at(format!(
        "(t, s, r) = ({:.6}, {:.6}, {:.6})",
        pipeline.grid.node(grams.nodes[a]),
        pipeline.grid.node(grams.nodes[b]),
        pipeline.grid.node(grams.nodes[c]) - pipeline.grid.t0
    ))
}

/// Per-sample comparison of the trapezoid force construction against a
/// constant reference kernel kappa: eta_t(i) = w_t(i) - kappa * cumtrapz(z)_t(i)
/// must reproduce w_0(i) at every node. Returns the maximal deviation over
/// samples and nodes relative to max_i |w_0(i)|.
pub fn per_sample_constant_kernel_match(
    force: &ObsTable,
    z: &ObsTable,
    grid: TimeGrid,
    kappa: Complex64,
) -> f64 {
    let n = force.n_samples;
    let count = grid.count;
    let dt = grid.dt;
    let n_chunks = n.div_ceil(CHUNK);
    let (max_dev, max_ref) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n);
            let mut dev = 0.0f64;
            let mut reference = 0.0f64;
            for i in lo..hi {
                let wr = force.row(i);
                let zr = z.row(i);
                let w0 = wr[0];
                reference = reference.max(w0.norm());
                let mut cum = Complex64::new(0.0, 0.0);
                for k in 1..count {
                    cum += (zr[k - 1] + zr[k]) * (0.5 * dt);
                    let eta = wr[k] - kappa * cum;
                    dev = dev.max((eta - w0).norm());
                }
            }
            (dev, reference)
        })
        .reduce(
            || (0.0, 0.0),
            |x, y| (x.0.max(y.0), x.1.max(y.1)),
        );
    max_dev / max_ref.max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::InnerProductSpace;
    use crate::mori::{self, MoriProjection, OrbitData};
    use crate::trajectory::{integrate_flow, sample_initial};

    /// A moderate oscillator ensemble shared by the consistency tests.
    fn small_ensemble() -> (SystemSpec, TrajectoryEnsemble) {
        let spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        let initials = sample_initial(&spec, 2000, 41).unwrap();
        let grid = TimeGrid::from_span(2.0, 0.02);
        let ens = integrate_flow(&spec, &initials, grid, 10, 41).unwrap();
        (spec, ens)
    }

    #[test]
    fn pipeline_matches_generic_frame_route_bit_for_bit_in_value() {
        // The chunked sample-major pipeline must agree with the generic
        // node-major route through hilbert/mori to near machine precision.
        let (spec, ens) = small_ensemble();
        let pipeline = EnsemblePipeline::new(&ens, &spec).unwrap();

        let space = InnerProductSpace::ensemble_uniform(ens.n_samples);
        let z_frames = crate::trajectory::observable_frames(&ens, &spec.observable).unwrap();
        let lz_obs = apply_generator(&spec, &spec.observable);
        let lz_frames = crate::trajectory::observable_frames(&ens, &lz_obs).unwrap();
        let p = MoriProjection::new(space.clone(), z_frames[0].clone()).unwrap();
        let data = OrbitData {
            grid: ens.grid,
            z: z_frames,
            lz: lz_frames,
        };
        // Q L† z = -Q L z in the measure-preserving case.
        let qlz = p.project_orthogonal(&data.lz[0]).unwrap();
        let qldagger_z = qlz.mapv(|v| -v);
        let inputs = mori::gle_inputs(&data, &p, &qldagger_z).unwrap();
        let kernel = mori::extract_kernel(&inputs.g, &inputs.h).unwrap();

        assert!((pipeline.omega() - inputs.omega).norm() < 1e-12);
        for k in 0..ens.grid.count {
            assert!(
                (pipeline.kernel.values[k] - kernel.values[k]).norm() < 1e-10,
                "kernel mismatch at node {k}"
            );
            assert!((pipeline.inputs.g.values[k] - inputs.g.values[k]).norm() < 1e-12);
            assert!((pipeline.inputs.h.values[k] - inputs.h.values[k]).norm() < 1e-12);
        }

        // Force statistics match the frame-based forces.
        let eta = mori::fluctuating_forces(&data, &p, &kernel).unwrap();
        let nodes = pipeline.checked_nodes(20);
        let grams = pipeline.force_grams(&nodes);
        for (a, &node) in nodes.iter().enumerate() {
            let direct = space.inner(&eta.frames[node], &eta.frames[0]).unwrap();
            assert!(
                (grams.pair(a, 0) - direct).norm() < 1e-10,
                "gram mismatch at node {node}"
            );
        }
    }

    /// Moment-exact four-point lattice for the oscillator: states
    /// (±sigma_q, ±sigma_p) reproduce <q^2>, <p^2>, <qp> of the Gibbs
    /// measure exactly, which removes all Monte Carlo noise from the
    /// two-dimensional invariant subspace the pipeline works in.
    fn lattice_ensemble(omega: f64, grid: TimeGrid) -> (SystemSpec, TrajectoryEnsemble) {
        let spec = SystemSpec::harmonic_oscillator(omega, 1.0);
        let sq = 1.0 / omega;
        let states = vec![sq, 1.0, sq, -1.0, -sq, 1.0, -sq, -1.0];
        let samples = crate::trajectory::Samples {
            dim: 2,
            states,
            proposals: 0,
            rejections: 0,
            non_finite_rejections: 0,
            high_rejection_warning: false,
        };
        let ens = integrate_flow(&spec, &samples, grid, 20, 0).unwrap();
        (spec, ens)
    }

    #[test]
    fn oscillator_kernel_is_constant_on_moment_exact_lattice() {
        // With exact second moments the extracted kernel is -omega^2 up to
        // quadrature and integrator error only.
        let grid = TimeGrid::from_span(5.0, 0.01);
        let (spec, ens) = lattice_ensemble(2.0, grid);
        let pipeline = EnsemblePipeline::new(&ens, &spec).unwrap();
        let mut dev = 0.0f64;
        for v in &pipeline.kernel.values {
            dev = dev.max((v.re + 4.0).abs() / 4.0);
        }
        assert!(dev < 5e-3, "lattice kernel deviation {dev:.3e}");
        assert!(pipeline.omega().norm() < 1e-12, "drift must vanish exactly");
    }

    #[test]
    fn oscillator_kernel_statistical_error_is_time_amplified() {
        // At finite N the kernel picks up a detuning error that grows with
        // t^2; check the deviation stays inside a 5-sigma envelope of the
        // analytic amplification (2/sqrt(N)) (1 + omega^2 t^2 / 2).
        let (spec, ens) = small_ensemble();
        let pipeline = EnsemblePipeline::new(&ens, &spec).unwrap();
        let n = ens.n_samples as f64;
        for (k, v) in pipeline.kernel.values.iter().enumerate() {
            let t = ens.grid.node(k);
            let envelope = 5.0 * (2.0 / n.sqrt()) * (1.0 + 2.0 * t * t);
            let rel = (v.re + 4.0).abs() / 4.0;
            assert!(
                rel < envelope + 5e-3,
                "kernel {v} at t = {t}: {rel:.3e} vs envelope {envelope:.3e}"
            );
        }
    }

    #[test]
    fn ensemble_checks_on_lattice_are_quadrature_limited() {
        let grid = TimeGrid::from_span(3.0, 0.01);
        let (spec, ens) = lattice_ensemble(2.0, grid);
        let pipeline = EnsemblePipeline::new(&ens, &spec).unwrap();
        let nodes = pipeline.checked_nodes(60);
        let grams = pipeline.force_grams(&nodes);

        // Skew 2FDT is machine-exact by construction on the ensemble space
        // (same trapezoid weights on both sides).
        let fdt = check_fdt(&pipeline, &grams, 1e-10, 4.0);
        assert!(fdt.passed(), "{fdt:?}");

        let orth = check_orthogonality(&pipeline, &grams, 10.0 * grid.dt * grid.dt);
        assert!(orth.passed(), "{orth:?}");

        // Stationarity drift is driven by the kernel's O(dt^2) error; check
        // the magnitude and second-order decay under grid refinement.
        let stat_dev = |dt: f64| {
            let grid = TimeGrid::from_span(3.0, dt);
            let (spec, ens) = lattice_ensemble(2.0, grid);
            let pipeline = EnsemblePipeline::new(&ens, &spec).unwrap();
            let nodes = pipeline.checked_nodes(60);
            let grams = pipeline.force_grams(&nodes);
            check_stationarity(&pipeline, &grams, 1.0).max_deviation
        };
        let coarse = stat_dev(0.01);
        let fine = stat_dev(0.005);
        assert!(coarse < 50.0 * 0.01 * 0.01, "stationarity drift {coarse:.3e}");
        let ratio = coarse / fine;
        assert!((2.5..=6.0).contains(&ratio), "stationarity order ratio {ratio}");
    }

    #[test]
    fn ensemble_checks_pass_at_monte_carlo_scale() {
        let (spec, ens) = small_ensemble();
        let pipeline = EnsemblePipeline::new(&ens, &spec).unwrap();
        let nodes = pipeline.checked_nodes(40);
        let grams = pipeline.force_grams(&nodes);
        let n = ens.n_samples as f64;
        let t_max = ens.grid.t_max();
        // Statistical amplification envelope as in the kernel test.
        let envelope = 5.0 * (2.0 / n.sqrt()) * (1.0 + 2.0 * t_max * t_max);

        let fdt = check_fdt(&pipeline, &grams, 1e-10, 4.0);
        assert!(fdt.passed(), "{fdt:?}");

        let orth = check_orthogonality(&pipeline, &grams, envelope);
        assert!(orth.passed(), "{orth:?}");

        let stat = check_stationarity(&pipeline, &grams, 4.0 * envelope);
        assert!(stat.passed(), "{stat:?}");
    }

    #[test]
    fn per_sample_match_for_the_oscillator_oracle() {
        // With the exact kernel -omega^2 and the momentum as reference,
        // p(t) + omega^2 int_0^t q = p(0) per sample up to integrator and
        // quadrature error.
        let (spec, ens) = small_ensemble();
        let z = ObsTable::evaluate(&ens, &spec.observable).unwrap();
        let momentum = ObsTable::evaluate(&ens, &ObservableSpec::coordinate(1)).unwrap();
        let dev = per_sample_constant_kernel_match(
            &momentum,
            &z,
            ens.grid,
            Complex64::new(-4.0, 0.0),
        );
        assert!(dev < 1e-3, "per-sample force deviation {dev:.3e}");
    }

    #[test]
    fn determinism_across_worker_counts() {
        let (spec, ens) = small_ensemble();
        let run = || {
            let p = EnsemblePipeline::new(&ens, &spec).unwrap();
            let nodes = p.checked_nodes(10);
            let g = p.force_grams(&nodes);
            (p.kernel.values.clone(), g.pair(3, 0))
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let multi = run();
        assert_eq!(single.1, multi.1, "gram must not depend on worker count");
        for (a, b) in single.0.iter().zip(&multi.0) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
    }
}
