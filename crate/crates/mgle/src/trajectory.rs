//! Classical statistical mechanics backend: sample initial conditions from a
//! density, integrate the flow with fixed-step RK4, apply the Koopman
//! operator by composition, estimate correlation functions, and estimate the
//! semigroup growth constant from the sampled phase-space divergence.
//!
//! Determinism contract: every operation is a pure function of
//! (system, N, seed, grid, substeps). Sample work parallelizes over a fixed
//! chunk decomposition and reductions run in fixed index order, so results
//! are bit-identical regardless of worker count.

use std::sync::Arc;

use ndarray::Array1;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{MgleError, Result};
use crate::hilbert::Vector;
use crate::report::Check;
use crate::volterra::{Series, TimeGrid};

type ValueFn = Arc<dyn Fn(&[f64]) -> Complex64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<Complex64> + Send + Sync>;
type FieldFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Complex-valued observable with an optional analytic gradient.
#[derive(Clone)]
pub struct ObservableSpec {
    value: ValueFn,
    gradient: Option<GradientFn>,
}

impl std::fmt::Debug for ObservableSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObservableSpec")
            .field("gradient", &self.gradient.is_some())
            .finish()
    }
}

/// One term of a polynomial observable: coeff * prod_j x_j^{powers[j]}.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Monomial {
    pub coeff_re: f64,
    #[serde(default)]
    pub coeff_im: f64,
    pub powers: Vec<u32>,
}

impl ObservableSpec {
    pub fn from_fn(value: impl Fn(&[f64]) -> Complex64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            gradient: None,
        }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64]) -> Vec<Complex64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    /// The coordinate observable x_i.
    pub fn coordinate(index: usize) -> Self {
        Self {
            value: Arc::new(move |x: &[f64]| Complex64::new(x[index], 0.0)),
            gradient: Some(Arc::new(move |x: &[f64]| {
                let mut g = vec![Complex64::new(0.0, 0.0); x.len()];
                g[index] = Complex64::new(1.0, 0.0);
                g
            })),
        }
    }

    /// Polynomial observable with analytic gradient.
    pub fn polynomial(terms: Vec<Monomial>) -> Self {
        let terms = Arc::new(terms);
        let value_terms = Arc::clone(&terms);
        let grad_terms = Arc::clone(&terms);
        Self {
            value: Arc::new(move |x: &[f64]| {
                let mut acc = Complex64::new(0.0, 0.0);
                for term in value_terms.iter() {
                    let mut prod = Complex64::new(term.coeff_re, term.coeff_im);
                    for (j, &p) in term.powers.iter().enumerate() {
                        prod *= Complex64::new(x[j].powi(p as i32), 0.0);
                    }
                    acc += prod;
                }
                acc
            }),
            gradient: Some(Arc::new(move |x: &[f64]| {
                let n = x.len();
                let mut g = vec![Complex64::new(0.0, 0.0); n];
                for term in grad_terms.iter() {
                    for d in 0..n {
                        let p = *term.powers.get(d).unwrap_or(&0);
                        if p == 0 {
                            continue;
                        }
                        let mut prod = Complex64::new(term.coeff_re, term.coeff_im)
                            * Complex64::new(p as f64 * x[d].powi(p as i32 - 1), 0.0);
                        for (j, &pj) in term.powers.iter().enumerate() {
                            if j != d {
                                prod *= Complex64::new(x[j].powi(pj as i32), 0.0);
                            }
                        }
                        g[d] += prod;
                    }
                }
                g
            })),
        }
    }

    pub fn value(&self, x: &[f64]) -> Complex64 {
        (self.value)(x)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient if attached, otherwise central differences with the
    /// standard first-derivative step h = eps^{1/3} (1 + |x_i|).
    pub fn gradient(&self, x: &[f64]) -> Vec<Complex64> {
        if let Some(g) = &self.gradient {
            return g(x);
        }
        finite_difference_gradient(&*self.value, x)
    }

    /// Checks the analytic gradient against central differences at the probe
    /// points (1e-4 relative), as a load-time validation.
    pub fn validate_gradient(&self, probes: &[Vec<f64>]) -> Result<()> {
        let Some(g) = &self.gradient else {
            return Ok(());
        };
        for (idx, probe) in probes.iter().enumerate() {
            let analytic = g(probe);
            let numeric = finite_difference_gradient(&*self.value, probe);
            let scale = analytic
                .iter()
                .map(|v| v.norm())
                .fold(0.0f64, f64::max)
                .max(1.0);
            for (a, b) in analytic.iter().zip(&numeric) {
                let dev = (a - b).norm() / scale;
                if dev > 1e-4 {
                    return Err(MgleError::GradientCheck {
                        deviation: dev,
                        probe: idx,
                    });
                }
            }
        }
        Ok(())
    }
}

fn finite_difference_gradient(
    value: &(dyn Fn(&[f64]) -> Complex64 + Send + Sync),
    x: &[f64],
) -> Vec<Complex64> {
    let h0 = f64::EPSILON.cbrt();
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let h = h0 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let fp = value(&probe);
        probe[i] = x[i] - h;
        let fm = value(&probe);
        probe[i] = x[i];
        g.push((fp - fm) / Complex64::new(2.0 * h, 0.0));
    }
    g
}

/// Initial-condition sampler.
#[derive(Debug, Clone)]
pub enum SamplerKind {
    /// Exact multivariate Gaussian with the given mean and covariance.
    Gaussian {
        mean: Vec<f64>,
        covariance: Vec<Vec<f64>>,
    },
    /// Gibbs measure of a quadratic Hamiltonian x^T H x / 2 at inverse
    /// temperature beta; the exact Gaussian with covariance (beta H)^{-1}.
    GibbsQuadratic { hamiltonian: Vec<Vec<f64>>, beta: f64 },
    /// Random-walk Metropolis targeting exp(log_rho).
    Metropolis {
        proposal_scale: f64,
        burn_in: usize,
        thinning: usize,
    },
}

#[derive(Debug, Clone)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub seed: u64,
}

/// Classical dynamical system: vector field, density, observable, sampler.
#[derive(Clone)]
pub struct SystemSpec {
    pub dim: usize,
    pub field: FieldFn,
    pub div_field: Option<ScalarFn>,
    pub log_rho: ScalarFn,
    pub grad_log_rho: Option<FieldFn>,
    pub observable: ObservableSpec,
    pub sampler: SamplerSpec,
}

impl std::fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SystemSpec")
            .field("dim", &self.dim)
            .field("sampler", &self.sampler)
            .finish()
    }
}

impl SystemSpec {
    /// Harmonic oscillator (q, p) with Hamiltonian p^2/2 + w^2 q^2/2 at
    /// inverse temperature beta; the observable of interest is q.
    pub fn harmonic_oscillator(omega: f64, beta: f64) -> Self {
        let w2 = omega * omega;
        Self {
            dim: 2,
            field: Arc::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = x[1];
                out[1] = -w2 * x[0];
            }),
            div_field: Some(Arc::new(|_x: &[f64]| 0.0)),
            log_rho: Arc::new(move |x: &[f64]| -beta * (0.5 * x[1] * x[1] + 0.5 * w2 * x[0] * x[0])),
            grad_log_rho: Some(Arc::new(move |x: &[f64], out: &mut [f64]| {
                out[0] = -beta * w2 * x[0];
                out[1] = -beta * x[1];
            })),
            observable: ObservableSpec::coordinate(0),
            sampler: SamplerSpec {
                kind: SamplerKind::GibbsQuadratic {
                    hamiltonian: vec![vec![w2, 0.0], vec![0.0, 1.0]],
                    beta,
                },
                seed: 0,
            },
        }
    }

    /// F(x) = A x with a Gaussian initial density.
    pub fn linear_field(a: Vec<Vec<f64>>, covariance: Vec<Vec<f64>>) -> Self {
        let dim = a.len();
        let trace: f64 = (0..dim).map(|i| a[i][i]).sum();
        let a_arc = Arc::new(a);
        let a_field = Arc::clone(&a_arc);
        Self {
            dim,
            field: Arc::new(move |x: &[f64], out: &mut [f64]| {
                for i in 0..x.len() {
                    out[i] = a_field[i].iter().zip(x).map(|(c, v)| c * v).sum();
                }
            }),
            div_field: Some(Arc::new(move |_x: &[f64]| trace)),
            log_rho: Arc::new(|_x: &[f64]| 0.0),
            grad_log_rho: None,
            observable: ObservableSpec::coordinate(0),
            sampler: SamplerSpec {
                kind: SamplerKind::Gaussian {
                    mean: vec![0.0; dim],
                    covariance,
                },
                seed: 0,
            },
        }
    }

    fn eval_field(&self, x: &[f64], out: &mut [f64]) {
        (self.field)(x, out);
    }

    /// div F, analytic if available, otherwise central differences.
    pub fn divergence(&self, x: &[f64]) -> f64 {
        if let Some(div) = &self.div_field {
            return div(x);
        }
        let h0 = f64::EPSILON.cbrt();
        let n = self.dim;
        let mut probe = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            let h = h0 * (1.0 + x[i].abs());
            probe[i] = x[i] + h;
            self.eval_field(&probe, &mut fp);
            probe[i] = x[i] - h;
            self.eval_field(&probe, &mut fm);
            probe[i] = x[i];
            acc += (fp[i] - fm[i]) / (2.0 * h);
        }
        acc
    }

    /// grad log rho, analytic if available, otherwise central differences.
    pub fn grad_log_density(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n];
        if let Some(g) = &self.grad_log_rho {
            g(x, &mut out);
            return out;
        }
        let h0 = f64::EPSILON.cbrt();
        let mut probe = x.to_vec();
        for i in 0..n {
            let h = h0 * (1.0 + x[i].abs());
            probe[i] = x[i] + h;
            let lp = (self.log_rho)(&probe);
            probe[i] = x[i] - h;
            let lm = (self.log_rho)(&probe);
            probe[i] = x[i];
            out[i] = (lp - lm) / (2.0 * h);
        }
        out
    }
}

/// Sampling outcome: N states plus Metropolis diagnostics.
#[derive(Debug, Clone)]
pub struct Samples {
    pub dim: usize,
    /// Flat [N x dim] row-major states.
    pub states: Vec<f64>,
    pub proposals: usize,
    pub rejections: usize,
    pub non_finite_rejections: usize,
    /// Set when more than 90% of Metropolis proposals were rejected.
    pub high_rejection_warning: bool,
}

impl Samples {
    pub fn count(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn per_sample_rng(seed: u64, index: usize) -> ChaCha12Rng {
    // Independent per-sample stream keyed on (seed, index). The two inputs
    // are mixed through SplitMix64 before expansion; a plain xor would let
    // nearby seeds share streams (seed^1 at index 0 equals seed at index 1).
    let key = splitmix64(seed) ^ splitmix64((index as u64).wrapping_mul(0xA24BAED4963EE407));
    ChaCha12Rng::seed_from_u64(key)
}

/// Draw N initial states. Gaussian and Gibbs samplers draw each sample from
/// an independent per-sample stream (seed xor index); Metropolis runs one
/// chain with burn-in and thinning.
pub fn sample_initial(spec: &SystemSpec, n: usize, seed: u64) -> Result<Samples> {
    assert!(n >= 1, "need at least one sample");
    let dim = spec.dim;
    match &spec.sampler.kind {
        SamplerKind::Gaussian { mean, covariance } => {
            let chol = crate::linalg::cholesky_real(covariance)?;
            let states = gaussian_states(mean, &chol, n, seed);
            Ok(Samples {
                dim,
                states,
                proposals: 0,
                rejections: 0,
                non_finite_rejections: 0,
                high_rejection_warning: false,
            })
        }
        SamplerKind::GibbsQuadratic { hamiltonian, beta } => {
            // Covariance (beta H)^{-1}; sample via x = L^{-T} xi / sqrt(beta)
            // with H = L L^T, so no explicit inverse is formed.
            let chol = crate::linalg::cholesky_real(hamiltonian)?;
            let inv_sqrt_beta = 1.0 / beta.sqrt();
            let mut states = vec![0.0; n * dim];
            states
                .par_chunks_mut(dim)
                .enumerate()
                .for_each(|(i, out)| {
                    let mut rng = per_sample_rng(seed, i);
                    let xi: Vec<f64> = (0..dim)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) * inv_sqrt_beta)
                        .collect();
                    // Solve L^T x = xi (back substitution).
                    for r in (0..dim).rev() {
                        let mut sum = xi[r];
                        for c in (r + 1)..dim {
                            sum -= chol[c][r] * out[c];
                        }
                        out[r] = sum / chol[r][r];
                    }
                });
            Ok(Samples {
                dim,
                states,
                proposals: 0,
                rejections: 0,
                non_finite_rejections: 0,
                high_rejection_warning: false,
            })
        }
        SamplerKind::Metropolis {
            proposal_scale,
            burn_in,
            thinning,
        } => metropolis_chain(spec, n, seed, *proposal_scale, *burn_in, *thinning),
    }
}

fn gaussian_states(mean: &[f64], chol: &[Vec<f64>], n: usize, seed: u64) -> Vec<f64> {
    let dim = mean.len();
    let mut states = vec![0.0; n * dim];
    states
        .par_chunks_mut(dim)
        .enumerate()
        .for_each(|(i, out)| {
            let mut rng = per_sample_rng(seed, i);
            let xi: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for r in 0..dim {
                let mut acc = mean[r];
                for c in 0..=r {
                    acc += chol[r][c] * xi[c];
                }
                out[r] = acc;
            }
        });
    states
}

fn metropolis_chain(
    spec: &SystemSpec,
    n: usize,
    seed: u64,
    proposal_scale: f64,
    burn_in: usize,
    thinning: usize,
) -> Result<Samples> {
    let dim = spec.dim;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut x = vec![0.0; dim];
    let mut log_p = (spec.log_rho)(&x);
    if !log_p.is_finite() {
        return Err(MgleError::Config(
            "metropolis chain start has non-finite log density".into(),
        ));
    }
    let mut proposals = 0usize;
    let mut rejections = 0usize;
    let mut non_finite = 0usize;
    let mut states = Vec::with_capacity(n * dim);
    let stride = thinning.max(1);

    let step = |x: &mut Vec<f64>,
                    log_p: &mut f64,
                    rng: &mut ChaCha12Rng,
                    proposals: &mut usize,
                    rejections: &mut usize,
                    non_finite: &mut usize| {
        *proposals += 1;
        let proposal: Vec<f64> = x
            .iter()
            .map(|&v| v + proposal_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let log_q = (spec.log_rho)(&proposal);
        if !log_q.is_finite() {
            *non_finite += 1;
            *rejections += 1;
            return;
        }
        let accept = log_q - *log_p >= 0.0 || rng.gen::<f64>().ln() < log_q - *log_p;
        if accept {
            *x = proposal;
            *log_p = log_q;
        } else {
            *rejections += 1;
        }
    };

    for _ in 0..burn_in {
        step(&mut x, &mut log_p, &mut rng, &mut proposals, &mut rejections, &mut non_finite);
    }
    for _ in 0..n {
        for _ in 0..stride {
            step(&mut x, &mut log_p, &mut rng, &mut proposals, &mut rejections, &mut non_finite);
        }
        states.extend_from_slice(&x);
    }
    let high = proposals > 0 && rejections * 10 > proposals * 9;
    Ok(Samples {
        dim,
        states,
        proposals,
        rejections,
        non_finite_rejections: non_finite,
        high_rejection_warning: high,
    })
}

/// Sampled flow: states[i][k][j] = coordinate j of phi_{t_k}(X_i), flat
/// row-major over (sample, node, coordinate).
#[derive(Debug, Clone)]
pub struct TrajectoryEnsemble {
    pub n_samples: usize,
    pub dim: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    states: Vec<f64>,
}

impl TrajectoryEnsemble {
    pub fn state(&self, sample: usize, node: usize) -> &[f64] {
        let base = (sample * self.grid.count + node) * self.dim;
        &self.states[base..base + self.dim]
    }

    pub fn raw_states(&self) -> &[f64] {
        &self.states
    }

    pub fn from_raw(
        n_samples: usize,
        dim: usize,
        grid: TimeGrid,
        seed: u64,
        states: Vec<f64>,
    ) -> Self {
        assert_eq!(states.len(), n_samples * grid.count * dim);
        Self {
            n_samples,
            dim,
            grid,
            seed,
            states,
        }
    }
}

/// One RK4 step of the flow ODE.
fn rk4_step(spec: &SystemSpec, x: &mut [f64], h: f64, scratch: &mut Rk4Scratch) {
    let n = x.len();
    spec.eval_field(x, &mut scratch.k1);
    for i in 0..n {
        scratch.tmp[i] = x[i] + 0.5 * h * scratch.k1[i];
    }
    spec.eval_field(&scratch.tmp, &mut scratch.k2);
    for i in 0..n {
        scratch.tmp[i] = x[i] + 0.5 * h * scratch.k2[i];
    }
    spec.eval_field(&scratch.tmp, &mut scratch.k3);
    for i in 0..n {
        scratch.tmp[i] = x[i] + h * scratch.k3[i];
    }
    spec.eval_field(&scratch.tmp, &mut scratch.k4);
    for i in 0..n {
        x[i] += h / 6.0 * (scratch.k1[i] + 2.0 * scratch.k2[i] + 2.0 * scratch.k3[i] + scratch.k4[i]);
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// Integrate one sample, writing each grid node into `out` ([count x dim]).
pub fn integrate_sample_into(
    spec: &SystemSpec,
    x0: &[f64],
    grid: TimeGrid,
    substeps: usize,
    sample_index: usize,
    out: &mut [f64],
) -> Result<()> {
    assert!(substeps >= 1);
    let dim = spec.dim;
    let h = grid.dt / substeps as f64;
    let mut x = x0.to_vec();
    let mut scratch = Rk4Scratch::new(dim);
    out[..dim].copy_from_slice(&x);
    for k in 1..grid.count {
        for _ in 0..substeps {
            rk4_step(spec, &mut x, h, &mut scratch);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MgleError::NonFiniteState {
                sample: sample_index,
                time: grid.node(k),
            });
        }
        out[k * dim..(k + 1) * dim].copy_from_slice(&x);
    }
    Ok(())
}

/// Integrate all samples with classical fixed-step RK4 (step dt/substeps),
/// storing the states at every grid node.
pub fn integrate_flow(
    spec: &SystemSpec,
    initials: &Samples,
    grid: TimeGrid,
    substeps: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let n = initials.count();
    let dim = spec.dim;
    let mut states = vec![0.0; n * grid.count * dim];
    states
        .par_chunks_mut(grid.count * dim)
        .enumerate()
        .try_for_each(|(i, block)| {
            integrate_sample_into(spec, initials.state(i), grid, substeps, i, block)
        })?;
    Ok(TrajectoryEnsemble {
        n_samples: n,
        dim,
        grid,
        seed,
        states,
    })
}

/// Koopman correlation estimate (U(t) x, y) = sum_i w_i x(phi_t(X_i))
/// conj(y(X_i)) at every grid node, in fixed summation order.
pub fn estimate_correlation(
    ens: &TrajectoryEnsemble,
    x: &ObservableSpec,
    y: &ObservableSpec,
    weights: Option<&[f64]>,
) -> Result<Series> {
    let n = ens.n_samples;
    let uniform = 1.0 / n as f64;
    let y0: Vec<Complex64> = (0..n).map(|i| y.value(ens.state(i, 0))).collect();
    for (i, v) in y0.iter().enumerate() {
        if !v.re.is_finite() || !v.im.is_finite() {
            return Err(MgleError::NonFiniteObservable { sample: i });
        }
    }
    let values: Result<Vec<Complex64>> = (0..ens.grid.count)
        .into_par_iter()
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let v = x.value(ens.state(i, k));
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(MgleError::NonFiniteObservable { sample: i });
                }
                let w = weights.map_or(uniform, |w| w[i]);
                acc += v * y0[i].conj() * w;
            }
            Ok(acc)
        })
        .collect();
    Ok(Series::new(ens.grid, values?))
}

/// Frames of an observable along the ensemble, as vectors of the uniform
/// ensemble space (one value per sample).
pub fn observable_frames(ens: &TrajectoryEnsemble, obs: &ObservableSpec) -> Result<Vec<Vector>> {
    (0..ens.grid.count)
        .map(|k| {
            let mut frame = Array1::zeros(ens.n_samples);
            for i in 0..ens.n_samples {
                let v = obs.value(ens.state(i, k));
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(MgleError::NonFiniteObservable { sample: i });
                }
                frame[i] = v;
            }
            Ok(frame)
        })
        .collect()
}

/// Generator action on an observable: (L z)(x) = F(x) . grad z(x).
/// The result carries no gradient; a second application is unsupported.
pub fn apply_generator(spec: &SystemSpec, obs: &ObservableSpec) -> ObservableSpec {
    let field = Arc::clone(&spec.field);
    let obs = obs.clone();
    let dim = spec.dim;
    ObservableSpec {
        value: Arc::new(move |x: &[f64]| {
            let mut f = vec![0.0; dim];
            field(x, &mut f);
            let g = obs.gradient(x);
            f.iter()
                .zip(&g)
                .map(|(fi, gi)| gi * Complex64::new(*fi, 0.0))
                .sum()
        }),
        gradient: None,
    }
}

/// Growth-constant estimate from sampled states.
#[derive(Debug, Clone)]
pub struct Omega0Estimate {
    pub value: f64,
    pub sample_max_location: Vec<f64>,
    /// Set when the running maximum keeps growing through the tail of the
    /// sample (final max exceeds the first-decile max by more than 10%),
    /// which suggests an unbounded essential supremum.
    pub flagged_unbounded: bool,
}

/// omega_0 = max over samples of |(div F + F . grad log rho) / 2|, the
/// sampled essential supremum of |div(rho F) / (2 rho)|.
pub fn estimate_omega0(spec: &SystemSpec, samples: usize, seed: u64) -> Result<Omega0Estimate> {
    let draws = sample_initial(spec, samples, seed)?;
    let n = draws.count();
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = draws.state(i);
            let div = spec.divergence(x);
            let glr = spec.grad_log_density(x);
            let mut f = vec![0.0; spec.dim];
            spec.eval_field(x, &mut f);
            let advect: f64 = f.iter().zip(&glr).map(|(a, b)| a * b).sum();
            0.5 * (div + advect).abs()
        })
        .collect();
    let mut best = 0.0f64;
    let mut best_idx = 0usize;
    let mut first_decile_max = 0.0f64;
    let decile = (n / 10).max(1);
    for (i, &v) in values.iter().enumerate() {
        if v > best {
            best = v;
            best_idx = i;
        }
        if i + 1 == decile {
            first_decile_max = best;
        }
    }
    let flagged = best > 1.1 * first_decile_max.max(f64::MIN_POSITIVE) && n > 10;
    Ok(Omega0Estimate {
        value: best,
        sample_max_location: draws.state(best_idx).to_vec(),
        flagged_unbounded: flagged,
    })
}

/// Isometry check for measure-preserving flows: the equal-time correlation
/// (U(t) x, U(t) y) must be constant in t. Reports the maximal drift from
/// its t = 0 value.
pub fn check_isometry(
    ens: &TrajectoryEnsemble,
    x: &ObservableSpec,
    y: &ObservableSpec,
    weights: Option<&[f64]>,
    tol: f64,
) -> Result<Check> {
    let n = ens.n_samples;
    let uniform = 1.0 / n as f64;
    let corr: Vec<Complex64> = (0..ens.grid.count)
        .into_par_iter()
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..n {
                let s = ens.state(i, k);
                let w = weights.map_or(uniform, |w| w[i]);
                acc += x.value(s) * y.value(s).conj() * w;
            }
            acc
        })
        .collect();
    let mut worst = (0.0f64, 0usize);
    for (k, v) in corr.iter().enumerate() {
        let drift = (v - corr[0]).norm();
        if drift > worst.0 {
            worst = (drift, k);
        }
    }
    Ok(Check::pass_fail("isometry", worst.0, tol)
        .at(format!("t = {:.6}", ens.grid.node(worst.1))))
}

// ---------------------------------------------------------------------------
// Trajectory dump: "MGLE1" magic, n, N, count as little-endian u64, dt as
// little-endian f64, then the [N x count x n] state array in column-major
// order (sample index fastest, coordinate index slowest).
// ---------------------------------------------------------------------------

const DUMP_MAGIC: &[u8; 5] = b"MGLE1";

pub fn write_ensemble(path: &std::path::Path, ens: &TrajectoryEnsemble) -> Result<()> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(DUMP_MAGIC)?;
    file.write_all(&(ens.dim as u64).to_le_bytes())?;
    file.write_all(&(ens.n_samples as u64).to_le_bytes())?;
    file.write_all(&(ens.grid.count as u64).to_le_bytes())?;
    file.write_all(&ens.grid.dt.to_le_bytes())?;
    for j in 0..ens.dim {
        for k in 0..ens.grid.count {
            for i in 0..ens.n_samples {
                file.write_all(&ens.state(i, k)[j].to_le_bytes())?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

pub fn read_ensemble(path: &std::path::Path) -> Result<TrajectoryEnsemble> {
    use std::io::Read;
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(MgleError::BadDump(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut u64buf = [0u8; 8];
    let mut read_u64 = |file: &mut std::io::BufReader<std::fs::File>| -> Result<u64> {
        file.read_exact(&mut u64buf)?;
        Ok(u64::from_le_bytes(u64buf))
    };
    let dim = read_u64(&mut file)? as usize;
    let n_samples = read_u64(&mut file)? as usize;
    let count = read_u64(&mut file)? as usize;
    let mut f64buf = [0u8; 8];
    file.read_exact(&mut f64buf)?;
    let dt = f64::from_le_bytes(f64buf);
    if dim == 0 || n_samples == 0 || count < 2 || !(dt > 0.0) {
        return Err(MgleError::BadDump(format!(
            "bad header: dim={dim}, N={n_samples}, count={count}, dt={dt}"
        )));
    }
    let grid = TimeGrid::new(0.0, dt, count);
    let mut states = vec![0.0f64; n_samples * count * dim];
    for j in 0..dim {
        for k in 0..count {
            for i in 0..n_samples {
                file.read_exact(&mut f64buf)?;
                states[(i * count + k) * dim + j] = f64::from_le_bytes(f64buf);
            }
        }
    }
    Ok(TrajectoryEnsemble {
        n_samples,
        dim,
        grid,
        seed: 0,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(t_max: f64, dt: f64) -> TimeGrid {
        TimeGrid::from_span(t_max, dt)
    }

    #[test]
    fn gaussian_sampler_moments_and_determinism() {
        let spec = SystemSpec::linear_field(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let n = 40_000;
        let s1 = sample_initial(&spec, n, 7).unwrap();
        let s2 = sample_initial(&spec, n, 7).unwrap();
        assert_eq!(s1.states, s2.states, "fixed seed must be bit-identical");

        for j in 0..2 {
            let mean: f64 = (0..n).map(|i| s1.state(i)[j]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean[{j}] = {mean}");
        }

        let s3 = sample_initial(&spec, n, 8).unwrap();
        assert_ne!(s1.states, s3.states, "different seeds must differ");
    }

    #[test]
    fn gibbs_quadratic_matches_gaussian_moments() {
        // H(q,p) = p^2/2 + w^2 q^2/2 at beta = 1: <q^2> = 1/w^2, <p^2> = 1.
        let spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        let n = 50_000;
        let s = sample_initial(&spec, n, 3).unwrap();
        let q2: f64 = (0..n).map(|i| s.state(i)[0].powi(2)).sum::<f64>() / n as f64;
        let p2: f64 = (0..n).map(|i| s.state(i)[1].powi(2)).sum::<f64>() / n as f64;
        let bound = 5.0 / (n as f64).sqrt();
        assert!((q2 - 0.25).abs() < bound * 0.25 * 2.0f64.sqrt() * 1.5, "q2 = {q2}");
        assert!((p2 - 1.0).abs() < bound * 2.0f64.sqrt() * 1.5, "p2 = {p2}");
    }

    #[test]
    fn metropolis_is_deterministic_and_counts_rejections() {
        // 1D logistic density via a random-walk chain.
        let spec = SystemSpec {
            dim: 1,
            field: Arc::new(|_x, out| out[0] = 1.0),
            div_field: Some(Arc::new(|_| 0.0)),
            log_rho: Arc::new(|x: &[f64]| {
                let u = -x[0];
                let softplus = if u > 30.0 { u } else { u.exp().ln_1p() };
                -x[0] - 2.0 * softplus
            }),
            grad_log_rho: Some(Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = -(x[0] / 2.0).tanh();
            })),
            observable: ObservableSpec::coordinate(0),
            sampler: SamplerSpec {
                kind: SamplerKind::Metropolis {
                    proposal_scale: 2.0,
                    burn_in: 500,
                    thinning: 5,
                },
                seed: 0,
            },
        };
        let n = 20_000;
        let a = sample_initial(&spec, n, 11).unwrap();
        let b = sample_initial(&spec, n, 11).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.proposals, 500 + 5 * n);
        assert!(a.rejections > 0 && a.rejections < a.proposals);
        assert!(!a.high_rejection_warning, "logistic chain mixes fine");

        // Logistic variance is pi^2 / 3.
        let var: f64 = a.states.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = std::f64::consts::PI.powi(2) / 3.0;
        assert!((var - want).abs() / want < 0.1, "variance {var} vs {want}");
    }

    #[test]
    fn zero_field_keeps_trajectories_constant() {
        let mut spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        spec.field = Arc::new(|_x, out| out.fill(0.0));
        let initials = sample_initial(&spec, 32, 1).unwrap();
        let g = grid(1.0, 0.05);
        let ens = integrate_flow(&spec, &initials, g, 4, 1).unwrap();
        for i in 0..32 {
            for k in 0..g.count {
                assert_eq!(ens.state(i, k), initials.state(i));
            }
        }
    }

    #[test]
    fn oscillator_energy_drift_is_tiny() {
        let omega = 2.0;
        let spec = SystemSpec::harmonic_oscillator(omega, 1.0);
        let initials = sample_initial(&spec, 16, 5).unwrap();
        let g = grid(5.0, 0.01);
        let ens = integrate_flow(&spec, &initials, g, 10, 5).unwrap();
        let energy = |s: &[f64]| 0.5 * s[1] * s[1] + 0.5 * omega * omega * s[0] * s[0];
        let mut worst = 0.0f64;
        for i in 0..16 {
            let e0 = energy(ens.state(i, 0));
            for k in 0..g.count {
                worst = worst.max((energy(ens.state(i, k)) - e0).abs() / e0);
            }
        }
        assert!(worst <= 1e-8, "relative energy drift {worst:.3e}");
    }

    #[test]
    fn linear_field_matches_matrix_exponential_oracle() {
        let a = vec![vec![-0.2, 1.0], vec![-1.0, -0.1]];
        let spec = SystemSpec::linear_field(a.clone(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let initials = sample_initial(&spec, 8, 2).unwrap();
        let g = grid(3.0, 0.01);
        let ens = integrate_flow(&spec, &initials, g, 10, 2).unwrap();

        let ac = ndarray::Array2::from_shape_fn((2, 2), |(i, j)| Complex64::new(a[i][j], 0.0));
        let mut worst = 0.0f64;
        for k in [50, 150, 300] {
            let e = crate::expm::expm(&(&ac * Complex64::new(g.node(k), 0.0)));
            for i in 0..8 {
                let x0 = initials.state(i);
                for r in 0..2 {
                    let want = e[[r, 0]].re * x0[0] + e[[r, 1]].re * x0[1];
                    worst = worst.max((ens.state(i, k)[r] - want).abs());
                }
            }
        }
        assert!(worst < 1e-8, "flow vs expm deviation {worst:.3e}");
    }

    #[test]
    fn flow_property_and_time_reversal() {
        let spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        let initials = sample_initial(&spec, 8, 9).unwrap();
        let g = grid(2.0, 0.02);
        let ens = integrate_flow(&spec, &initials, g, 5, 9).unwrap();

        // phi_{t+s} = phi_t o phi_s: restart from the mid-state; the RK4
        // substeps align exactly, so this is a strict consistency check.
        let mid = g.count / 2;
        for i in 0..8 {
            let mut out = vec![0.0; (g.count - mid) * 2];
            let tail_grid = TimeGrid::new(0.0, g.dt, g.count - mid);
            integrate_sample_into(&spec, ens.state(i, mid), tail_grid, 5, i, &mut out).unwrap();
            for k in 0..(g.count - mid) {
                for j in 0..2 {
                    let dev = (out[k * 2 + j] - ens.state(i, mid + k)[j]).abs();
                    assert!(dev < 1e-12, "flow property violated: {dev:.3e}");
                }
            }
        }

        // Integrating the negated field from phi_T recovers the start.
        let mut reversed = spec.clone();
        let fwd = Arc::clone(&spec.field);
        reversed.field = Arc::new(move |x, out| {
            fwd(x, out);
            for v in out.iter_mut() {
                *v = -*v;
            }
        });
        for i in 0..8 {
            let mut out = vec![0.0; g.count * 2];
            integrate_sample_into(&spec, initials.state(i), g, 5, i, &mut out).unwrap();
            let end = &out[(g.count - 1) * 2..];
            let mut back = vec![0.0; g.count * 2];
            integrate_sample_into(&reversed, end, g, 5, i, &mut back).unwrap();
            let recovered = &back[(g.count - 1) * 2..];
            for j in 0..2 {
                assert!(
                    (recovered[j] - initials.state(i)[j]).abs() < 1e-8,
                    "time reversal failed"
                );
            }
        }
    }

    #[test]
    fn correlation_estimates() {
        let omega = 2.0;
        let spec = SystemSpec::harmonic_oscillator(omega, 1.0);
        let n = 20_000;
        let initials = sample_initial(&spec, n, 13).unwrap();
        let g = grid(3.0, 0.05);
        let ens = integrate_flow(&spec, &initials, g, 10, 13).unwrap();
        let q = ObservableSpec::coordinate(0);
        let p = ObservableSpec::coordinate(1);

        // C(0) is exactly the ensemble second moment (manual fixed-order sum).
        let c = estimate_correlation(&ens, &q, &q, None).unwrap();
        let mut manual = 0.0f64;
        for i in 0..n {
            manual += ens.state(i, 0)[0].powi(2) / n as f64;
        }
        assert!((c.values[0].re - manual).abs() < 1e-14);

        // C(t) tracks <q^2> cos(w t) within the Monte Carlo band.
        let band = 5.0 * 0.25 / (n as f64).sqrt() * 2.0;
        let mut worst = 0.0f64;
        for (k, v) in c.values.iter().enumerate() {
            worst = worst.max((v.re - c.values[0].re * (omega * g.node(k)).cos()).abs());
        }
        assert!(worst < band * 2.0, "autocorrelation drift {worst:.3e} vs band {band:.3e}");

        // Equilibrium decorrelation of q and p at t = 0.
        let qp = estimate_correlation(&ens, &q, &p, None).unwrap();
        let std_qp = 0.5 / (n as f64).sqrt();
        assert!(qp.values[0].norm() < 5.0 * std_qp, "(q, p) = {}", qp.values[0]);
    }

    #[test]
    fn generator_action_on_catalogue_observables() {
        let omega = 2.0;
        let spec = SystemSpec::harmonic_oscillator(omega, 1.0);
        let probes = [vec![0.3, -0.7], vec![-1.2, 0.4], vec![0.0, 1.0]];

        // L q = p.
        let lq = apply_generator(&spec, &ObservableSpec::coordinate(0));
        for x in &probes {
            assert!((lq.value(x) - Complex64::new(x[1], 0.0)).norm() < 1e-12);
        }
        // L p = -w^2 q.
        let lp = apply_generator(&spec, &ObservableSpec::coordinate(1));
        for x in &probes {
            assert!((lp.value(x) - Complex64::new(-omega * omega * x[0], 0.0)).norm() < 1e-12);
        }
        // L (q^2 / 2) = q p, with the analytic polynomial gradient.
        let q2 = ObservableSpec::polynomial(vec![Monomial {
            coeff_re: 0.5,
            coeff_im: 0.0,
            powers: vec![2, 0],
        }]);
        q2.validate_gradient(&probes.to_vec()).unwrap();
        let lq2 = apply_generator(&spec, &q2);
        for x in &probes {
            assert!((lq2.value(x) - Complex64::new(x[0] * x[1], 0.0)).norm() < 1e-12);
        }

        // A second application falls back to finite differences and stays
        // close to the symbolic answer L(qp) = p^2 - w^2 q^2.
        let qp = ObservableSpec::polynomial(vec![Monomial {
            coeff_re: 1.0,
            coeff_im: 0.0,
            powers: vec![1, 1],
        }]);
        let lqp = apply_generator(&spec, &qp);
        for x in &probes {
            let want = x[1] * x[1] - omega * omega * x[0] * x[0];
            assert!((lqp.value(x) - Complex64::new(want, 0.0)).norm() < 1e-6);
        }
    }

    #[test]
    fn gradient_validation_catches_mismatch() {
        let bad = ObservableSpec::from_fn(|x: &[f64]| Complex64::new(x[0] * x[0], 0.0))
            .with_gradient(|x: &[f64]| vec![Complex64::new(3.0 * x[0], 0.0)]);
        assert!(matches!(
            bad.validate_gradient(&[vec![1.0]]),
            Err(MgleError::GradientCheck { .. })
        ));
    }

    #[test]
    fn omega0_hamiltonian_gibbs_vanishes() {
        let spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        let est = estimate_omega0(&spec, 20_000, 17).unwrap();
        assert!(est.value < 1e-12, "omega0 = {:.3e}", est.value);
        assert!(!est.flagged_unbounded);
    }

    #[test]
    fn omega0_rotation_field_with_radial_density() {
        // F = (-y, x), radial Gaussian rho: div F = 0 and F . grad log rho = 0,
        // checked through the finite-difference fallbacks.
        let spec = SystemSpec {
            dim: 2,
            field: Arc::new(|x, out| {
                out[0] = -x[1];
                out[1] = x[0];
            }),
            div_field: None,
            log_rho: Arc::new(|x: &[f64]| -0.5 * (x[0] * x[0] + x[1] * x[1])),
            grad_log_rho: None,
            observable: ObservableSpec::coordinate(0),
            sampler: SamplerSpec {
                kind: SamplerKind::Gaussian {
                    mean: vec![0.0, 0.0],
                    covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                },
                seed: 0,
            },
        };
        let est = estimate_omega0(&spec, 5_000, 19).unwrap();
        assert!(est.value < 1e-6, "omega0 = {:.3e}", est.value);
    }

    #[test]
    fn omega0_logistic_drift_plateaus_near_half() {
        let spec = SystemSpec {
            dim: 1,
            field: Arc::new(|_x, out| out[0] = 1.0),
            div_field: Some(Arc::new(|_| 0.0)),
            log_rho: Arc::new(|x: &[f64]| {
                let u = -x[0];
                let softplus = if u > 30.0 { u } else { u.exp().ln_1p() };
                -x[0] - 2.0 * softplus
            }),
            grad_log_rho: Some(Arc::new(|x: &[f64], out: &mut [f64]| {
                out[0] = -(x[0] / 2.0).tanh();
            })),
            observable: ObservableSpec::coordinate(0),
            sampler: SamplerSpec {
                kind: SamplerKind::Metropolis {
                    proposal_scale: 2.5,
                    burn_in: 1000,
                    thinning: 3,
                },
                seed: 0,
            },
        };
        let est = estimate_omega0(&spec, 50_000, 23).unwrap();
        assert!(
            (0.45..=0.5).contains(&est.value),
            "omega0 = {} (location {:?})",
            est.value,
            est.sample_max_location
        );
        assert!(!est.flagged_unbounded, "bounded supremum must not be flagged");
    }

    #[test]
    fn omega0_flags_unbounded_divergence() {
        // F = 1 with a Gaussian density: |grad log rho| is unbounded, so the
        // running max keeps growing with sample size.
        let spec = SystemSpec {
            dim: 1,
            field: Arc::new(|_x, out| out[0] = 1.0),
            div_field: Some(Arc::new(|_| 0.0)),
            log_rho: Arc::new(|x: &[f64]| -0.5 * x[0] * x[0]),
            grad_log_rho: Some(Arc::new(|x: &[f64], out: &mut [f64]| out[0] = -x[0])),
            observable: ObservableSpec::coordinate(0),
            sampler: SamplerSpec {
                kind: SamplerKind::Gaussian {
                    mean: vec![0.0],
                    covariance: vec![vec![1.0]],
                },
                seed: 0,
            },
        };
        let est = estimate_omega0(&spec, 50_000, 29).unwrap();
        assert!(est.flagged_unbounded, "Gaussian tail must trip the plateau flag");
    }

    #[test]
    fn isometry_holds_for_gibbs_oscillator_and_fails_for_mismatch() {
        let spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        let n = 20_000;
        let initials = sample_initial(&spec, n, 31).unwrap();
        let g = grid(3.0, 0.05);
        let ens = integrate_flow(&spec, &initials, g, 10, 31).unwrap();
        let q = ObservableSpec::coordinate(0);
        let tol = 5.0 * 0.25 * 2.0f64.sqrt() / (n as f64).sqrt() + 1e-6;
        let check = check_isometry(&ens, &q, &q, None, tol).unwrap();
        assert!(check.passed(), "{check:?}");

        // Dissipative field with the equilibrium density of the oscillator:
        // ||U(t) q||^2 decays, the drift is macroscopic.
        let mut bad = spec.clone();
        bad.field = Arc::new(|x, out| {
            out[0] = -x[0];
            out[1] = -x[1];
        });
        let ens_bad = integrate_flow(&bad, &initials, g, 10, 31).unwrap();
        let check_bad = check_isometry(&ens_bad, &q, &q, None, tol).unwrap();
        assert!(!check_bad.passed(), "mismatched density/field must fail");
    }

    #[test]
    fn dump_roundtrip_is_bit_exact() {
        let spec = SystemSpec::harmonic_oscillator(1.5, 2.0);
        let initials = sample_initial(&spec, 64, 37).unwrap();
        let g = grid(1.0, 0.05);
        let ens = integrate_flow(&spec, &initials, g, 4, 37).unwrap();

        let dir = std::env::temp_dir().join("mgle_dump_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ens.mgle");
        write_ensemble(&path, &ens).unwrap();
        let back = read_ensemble(&path).unwrap();
        assert_eq!(back.n_samples, ens.n_samples);
        assert_eq!(back.dim, ens.dim);
        assert_eq!(back.grid.count, ens.grid.count);
        assert_eq!(back.grid.dt.to_bits(), ens.grid.dt.to_bits());
        assert_eq!(back.raw_states(), ens.raw_states());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn dump_rejects_bad_magic() {
        let dir = std::env::temp_dir().join("mgle_dump_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.mgle");
        std::fs::write(&path, b"NOPE!").unwrap();
        assert!(matches!(
            read_ensemble(&path),
            Err(MgleError::BadDump(_)) | Err(MgleError::Io(_))
        ));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn doubling_samples_shrinks_estimator_error() {
        // Standard error of C(0) over seed replicates scales like 1/sqrt(N).
        let spec = SystemSpec::harmonic_oscillator(2.0, 1.0);
        let replicate_std = |n: usize| {
            let mut values = Vec::new();
            for seed in 100..220u64 {
                let s = sample_initial(&spec, n, seed).unwrap();
                let c0: f64 = (0..n).map(|i| s.state(i)[0].powi(2)).sum::<f64>() / n as f64;
                values.push(c0);
            }
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64)
                .sqrt()
        };
        let ratio = replicate_std(400) / replicate_std(800);
        assert!(
            (1.25..=1.6).contains(&ratio),
            "std ratio {ratio} outside [1.25, 1.6]"
        );
    }
}
