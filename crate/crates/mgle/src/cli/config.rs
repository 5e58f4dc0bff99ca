//! Run configuration: versioned JSON with backend-specific system blocks.
//!
//! Matrix entries are nested arrays of [re, im] pairs. Trajectory
//! observables and vector fields come from a built-in catalogue; arbitrary
//! user code cannot be injected through a config file.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{MgleError, Result};
use crate::hilbert::{InnerProductSpace, Vector};
use crate::linops::OperatorModel;
use crate::nonstationary::TimeDependentGenerator;
use crate::trajectory::{Monomial, ObservableSpec, SamplerKind, SamplerSpec, SystemSpec};
use crate::volterra::TimeGrid;

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_GRID_NODES: usize = 1_000_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema: u32,
    pub backend: Backend,
    pub grid: GridConfig,
    pub system: SystemConfig,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub checks: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub tolerances: std::collections::BTreeMap<String, f64>,
    #[serde(default)]
    pub controls: Controls,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    Matrix,
    Trajectory,
    Nonstationary,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_max: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n: usize,
    pub seed: u64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    10
}

/// Negative-control switches: sabotage the extracted ingredients before
/// verification so the corresponding checks must fail.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controls {
    #[serde(default)]
    pub zero_kernel: bool,
    #[serde(default)]
    pub zero_forces: bool,
}

/// Analytic expectations for oracle-backed checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Expected constant kernel value (real part).
    #[serde(default)]
    pub kernel_constant: Option<f64>,
    /// Relative tolerance for the kernel-oracle check.
    #[serde(default)]
    pub kernel_rel_tol: Option<f64>,
    /// Reference observable reproduced by the forces (per sample).
    #[serde(default)]
    pub force_reference: Option<ObservableConfig>,
    /// Maximal relative per-sample force deviation.
    #[serde(default)]
    pub force_rel_tol: Option<f64>,
    /// Expected omega_0 window [lo, hi] with a clear plateau flag.
    #[serde(default)]
    pub omega0_range: Option<[f64; 2]>,
    /// Upper bound for omega_0 (measure-preserving systems).
    #[serde(default)]
    pub omega0_max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SystemConfig {
    Matrix(MatrixSystem),
    Trajectory(TrajectorySystem),
    Nonstationary(NonstationarySystem),
}

// --- matrix backend -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSystem {
    pub dim: usize,
    pub l: MatrixSpec,
    #[serde(default)]
    pub weight: Option<WeightSpec>,
    pub z: VectorSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    /// Explicit entries as [re, im] pairs.
    Entries(Vec<Vec<[f64; 2]>>),
    Preset(MatrixPreset),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MatrixPreset {
    /// Dense complex Gaussian entries, rescaled to unit weighted norm times
    /// `scale`. `skew = true` projects onto the skew-adjoint part first.
    Random {
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        skew: bool,
    },
    /// 2x2 oscillator generator [[0,1],[-omega^2,0]].
    Oscillator { omega: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Named(String),
    Entries(Vec<Vec<[f64; 2]>>),
    Preset(WeightPreset),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightPreset {
    /// I + A^H A for Gaussian A: Hermitian, comfortably positive definite.
    RandomPd { seed: u64 },
    /// Gibbs weight diag(omega^2, 1) of the oscillator at beta = 1.
    OscillatorGibbs { omega: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VectorSpec {
    Entries(Vec<[f64; 2]>),
    Preset(VectorPreset),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum VectorPreset {
    Random { seed: u64 },
    Coordinate { index: usize },
}

fn one() -> f64 {
    1.0
}

// --- trajectory backend ----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrajectorySystem {
    /// Equilibrium oscillator: F = (p, -omega^2 q), Gibbs density, z = q.
    HarmonicOscillator {
        omega: f64,
        beta: f64,
        #[serde(default)]
        observable: Option<ObservableConfig>,
    },
    /// Constant drift F = 1 on the line with the standard logistic density,
    /// sampled by a Metropolis chain.
    LogisticDrift {
        #[serde(default = "default_proposal")]
        proposal_scale: f64,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        #[serde(default = "default_thinning")]
        thinning: usize,
    },
    /// Negative control: dissipative field F = -x with the oscillator's
    /// Gibbs density (not invariant, so the isometry check must fail).
    DissipativeMismatch { omega: f64, beta: f64 },
}

fn default_proposal() -> f64 {
    2.5
}
fn default_burn_in() -> usize {
    1000
}
fn default_thinning() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObservableConfig {
    Coordinate { index: usize },
    Polynomial { terms: Vec<Monomial> },
}

impl ObservableConfig {
    pub fn build(&self, dim: usize) -> Result<ObservableSpec> {
        match self {
            ObservableConfig::Coordinate { index } => {
                if *index >= dim {
                    return Err(MgleError::Config(format!(
                        "observable coordinate index {index} out of range for dim {dim}"
                    )));
                }
                Ok(ObservableSpec::coordinate(*index))
            }
            ObservableConfig::Polynomial { terms } => {
                for term in terms {
                    if term.powers.len() != dim {
                        return Err(MgleError::Config(format!(
                            "monomial powers length {} does not match dim {dim}",
                            term.powers.len()
                        )));
                    }
                    let degree: u32 = term.powers.iter().sum();
                    if degree > 4 {
                        return Err(MgleError::Config(format!(
                            "monomial degree {degree} exceeds the catalogue limit 4"
                        )));
                    }
                }
                Ok(ObservableSpec::polynomial(terms.clone()))
            }
        }
    }
}

// --- nonstationary backend --------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NonstationarySystem {
    /// L(t) = [[0,1],[-(base + amplitude sin(frequency t)), 0]] with the
    /// Gibbs weight of the base oscillator and z = q.
    DrivenOscillator {
        base_omega_sq: f64,
        #[serde(default = "one")]
        drive_amplitude: f64,
        #[serde(default = "one")]
        drive_frequency: f64,
        #[serde(default = "default_substeps")]
        substeps: usize,
    },
    /// Constant generator (autonomous reduction).
    Constant {
        l: Vec<Vec<[f64; 2]>>,
        #[serde(default)]
        weight: Option<WeightSpec>,
        z: VectorSpec,
        #[serde(default = "default_substeps")]
        substeps: usize,
    },
}

// --- builders ---------------------------------------------------------------

fn parse_complex_matrix(entries: &[Vec<[f64; 2]>], dim: usize) -> Result<Array2<Complex64>> {
    if entries.len() != dim || entries.iter().any(|row| row.len() != dim) {
        return Err(MgleError::Config(format!(
            "matrix must be {dim}x{dim} [re, im] pairs"
        )));
    }
    Ok(Array2::from_shape_fn((dim, dim), |(i, j)| {
        Complex64::new(entries[i][j][0], entries[i][j][1])
    }))
}

fn parse_complex_vector(entries: &[[f64; 2]], dim: usize) -> Result<Vector> {
    if entries.len() != dim {
        return Err(MgleError::Config(format!(
            "vector must have {dim} [re, im] pairs"
        )));
    }
    Ok(Array1::from_iter(
        entries.iter().map(|e| Complex64::new(e[0], e[1])),
    ))
}

/// Deterministic dense Gaussian-ish matrix used by the random presets.
pub fn random_complex_matrix(n: usize, seed: u64, scale: f64) -> Array2<Complex64> {
    let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    Array2::from_shape_fn((n, n), |_| Complex64::new(next(), next()) * scale)
}

pub fn random_complex_vector(n: usize, seed: u64) -> Vector {
    let m = random_complex_matrix(n, seed, 1.0);
    Array1::from_iter(m.row(0).iter().cloned())
}

impl MatrixSystem {
    pub fn build_space(&self) -> Result<InnerProductSpace> {
        let weight = match &self.weight {
            None => return Ok(InnerProductSpace::coordinate_euclidean(self.dim)),
            Some(WeightSpec::Named(name)) if name == "identity" => {
                return Ok(InnerProductSpace::coordinate_euclidean(self.dim));
            }
            Some(WeightSpec::Named(name)) => {
                return Err(MgleError::Config(format!("unknown weight name '{name}'")));
            }
            Some(WeightSpec::Entries(rows)) => parse_complex_matrix(rows, self.dim)?,
            Some(WeightSpec::Preset(WeightPreset::RandomPd { seed })) => {
                let a = random_complex_matrix(self.dim, *seed, 0.4);
                let ah = crate::linalg::hermitian_transpose(&a);
                ah.dot(&a) + Array2::from_diag_elem(self.dim, Complex64::new(1.0, 0.0))
            }
            Some(WeightSpec::Preset(WeightPreset::OscillatorGibbs { omega })) => {
                if self.dim != 2 {
                    return Err(MgleError::Config(
                        "oscillator-gibbs weight requires dim = 2".into(),
                    ));
                }
                let mut w = Array2::zeros((2, 2));
                w[[0, 0]] = Complex64::new(omega * omega, 0.0);
                w[[1, 1]] = Complex64::new(1.0, 0.0);
                w
            }
        };
        InnerProductSpace::coordinate(weight)
    }

    pub fn build_model(&self, space: &InnerProductSpace) -> Result<OperatorModel> {
        let l = match &self.l {
            MatrixSpec::Entries(rows) => parse_complex_matrix(rows, self.dim)?,
            MatrixSpec::Preset(MatrixPreset::Random { seed, scale, skew }) => {
                let raw = random_complex_matrix(self.dim, *seed, 1.0);
                let raw = if *skew {
                    // Skew-adjoint part w.r.t. the weighted inner product.
                    let model = OperatorModel::new(space.clone(), raw)?;
                    let adj = model.adjoint();
                    (model.matrix() - adj.matrix()).mapv(|v| v * 0.5)
                } else {
                    raw
                };
                let norm = crate::linops::weighted_operator_norm(space, &raw).max(1e-12);
                raw.mapv(|v| v * (scale / norm))
            }
            MatrixSpec::Preset(MatrixPreset::Oscillator { omega }) => {
                if self.dim != 2 {
                    return Err(MgleError::Config("oscillator preset requires dim = 2".into()));
                }
                let mut l = Array2::zeros((2, 2));
                l[[0, 1]] = Complex64::new(1.0, 0.0);
                l[[1, 0]] = Complex64::new(-omega * omega, 0.0);
                l
            }
        };
        OperatorModel::new(space.clone(), l)
    }

    pub fn build_z(&self) -> Result<Vector> {
        match &self.z {
            VectorSpec::Entries(entries) => parse_complex_vector(entries, self.dim),
            VectorSpec::Preset(VectorPreset::Random { seed }) => {
                Ok(random_complex_vector(self.dim, *seed))
            }
            VectorSpec::Preset(VectorPreset::Coordinate { index }) => {
                if *index >= self.dim {
                    return Err(MgleError::Config(format!(
                        "z coordinate index {index} out of range"
                    )));
                }
                let mut v: Vector = Array1::zeros(self.dim);
                v[*index] = Complex64::new(1.0, 0.0);
                Ok(v)
            }
        }
    }
}

impl TrajectorySystem {
    pub fn build(&self, seed: u64) -> Result<SystemSpec> {
        match self {
            TrajectorySystem::HarmonicOscillator {
                omega,
                beta,
                observable,
            } => {
                let mut spec = SystemSpec::harmonic_oscillator(*omega, *beta);
                spec.sampler.seed = seed;
                if let Some(obs) = observable {
                    spec.observable = obs.build(2)?;
                }
                Ok(spec)
            }
            TrajectorySystem::LogisticDrift {
                proposal_scale,
                burn_in,
                thinning,
            } => Ok(SystemSpec {
                dim: 1,
                field: std::sync::Arc::new(|_x, out| out[0] = 1.0),
                div_field: Some(std::sync::Arc::new(|_| 0.0)),
                log_rho: std::sync::Arc::new(|x: &[f64]| {
                    let u = -x[0];
                    let softplus = if u > 30.0 { u } else { u.exp().ln_1p() };
                    -x[0] - 2.0 * softplus
                }),
                grad_log_rho: Some(std::sync::Arc::new(|x: &[f64], out: &mut [f64]| {
                    out[0] = -(x[0] / 2.0).tanh();
                })),
                observable: ObservableSpec::coordinate(0),
                sampler: SamplerSpec {
                    kind: SamplerKind::Metropolis {
                        proposal_scale: *proposal_scale,
                        burn_in: *burn_in,
                        thinning: *thinning,
                    },
                    seed,
                },
            }),
            TrajectorySystem::DissipativeMismatch { omega, beta } => {
                let mut spec = SystemSpec::harmonic_oscillator(*omega, *beta);
                spec.sampler.seed = seed;
                spec.field = std::sync::Arc::new(|x: &[f64], out: &mut [f64]| {
                    out[0] = -x[0];
                    out[1] = -x[1];
                });
                spec.div_field = Some(std::sync::Arc::new(|_| -2.0));
                Ok(spec)
            }
        }
    }

    /// Whether div(rho F) = 0 holds analytically for the preset.
    pub fn measure_preserving(&self) -> bool {
        matches!(self, TrajectorySystem::HarmonicOscillator { .. })
    }

    /// Whether the generator is skew-adjoint on L2(P) (equilibrium case).
    pub fn skew_adjoint(&self) -> bool {
        self.measure_preserving()
    }
}

impl NonstationarySystem {
    pub fn substeps(&self) -> usize {
        match self {
            NonstationarySystem::DrivenOscillator { substeps, .. } => *substeps,
            NonstationarySystem::Constant { substeps, .. } => *substeps,
        }
    }

    pub fn build(&self) -> Result<(TimeDependentGenerator, InnerProductSpace, Vector)> {
        match self {
            NonstationarySystem::DrivenOscillator {
                base_omega_sq,
                drive_amplitude,
                drive_frequency,
                ..
            } => {
                let base = *base_omega_sq;
                let amp = *drive_amplitude;
                let freq = *drive_frequency;
                let gen =
                    TimeDependentGenerator::driven_oscillator(move |t| base + amp * (freq * t).sin());
                let mut w = Array2::zeros((2, 2));
                w[[0, 0]] = Complex64::new(base, 0.0);
                w[[1, 1]] = Complex64::new(1.0, 0.0);
                let space = InnerProductSpace::coordinate(w)?;
                let z = Array1::from(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]);
                Ok((gen, space, z))
            }
            NonstationarySystem::Constant { l, weight, z, .. } => {
                let dim = l.len();
                let lm = parse_complex_matrix(l, dim)?;
                let space = match weight {
                    None => InnerProductSpace::coordinate_euclidean(dim),
                    Some(WeightSpec::Named(name)) if name == "identity" => {
                        InnerProductSpace::coordinate_euclidean(dim)
                    }
                    Some(WeightSpec::Named(name)) => {
                        return Err(MgleError::Config(format!("unknown weight name '{name}'")));
                    }
                    Some(WeightSpec::Entries(rows)) => {
                        InnerProductSpace::coordinate(parse_complex_matrix(rows, dim)?)?
                    }
                    Some(WeightSpec::Preset(WeightPreset::RandomPd { seed })) => {
                        let a = random_complex_matrix(dim, *seed, 0.4);
                        let ah = crate::linalg::hermitian_transpose(&a);
                        InnerProductSpace::coordinate(
                            ah.dot(&a) + Array2::from_diag_elem(dim, Complex64::new(1.0, 0.0)),
                        )?
                    }
                    Some(WeightSpec::Preset(WeightPreset::OscillatorGibbs { omega })) => {
                        let mut w = Array2::zeros((2, 2));
                        w[[0, 0]] = Complex64::new(omega * omega, 0.0);
                        w[[1, 1]] = Complex64::new(1.0, 0.0);
                        InnerProductSpace::coordinate(w)?
                    }
                };
                let zv = match z {
                    VectorSpec::Entries(entries) => parse_complex_vector(entries, dim)?,
                    VectorSpec::Preset(VectorPreset::Random { seed }) => {
                        random_complex_vector(dim, *seed)
                    }
                    VectorSpec::Preset(VectorPreset::Coordinate { index }) => {
                        let mut v: Vector = Array1::zeros(dim);
                        v[*index] = Complex64::new(1.0, 0.0);
                        v
                    }
                };
                let gen = TimeDependentGenerator::constant(lm);
                Ok((gen, space, zv))
            }
        }
    }
}

/// Known check names per backend.
pub fn known_checks(backend: Backend) -> &'static [&'static str] {
    match backend {
        Backend::Matrix => &[
            "gle",
            "2fdt",
            "orthogonality",
            "dyson",
            "unitarity",
            "semigroup",
            "growth-bound",
            "stationarity",
            "memory-closure",
        ],
        Backend::Trajectory => &[
            "2fdt",
            "orthogonality",
            "stationarity",
            "isometry",
            "omega0",
            "kernel-oracle",
            "forces-oracle",
            "drift",
        ],
        Backend::Nonstationary => &["composition", "ns-gle", "ns-orthogonality", "ns-2fdt"],
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| MgleError::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            MgleError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(MgleError::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema
            )));
        }
        if !(self.grid.dt > 0.0) || !(self.grid.t_max > 0.0) {
            return Err(MgleError::Config("grid.dt and grid.t_max must be positive".into()));
        }
        let nodes = (self.grid.t_max / self.grid.dt).round() as usize + 1;
        if nodes > MAX_GRID_NODES {
            return Err(MgleError::Config(format!(
                "grid has {nodes} nodes, more than the {MAX_GRID_NODES} cap"
            )));
        }
        let known = known_checks(self.backend);
        for check in &self.checks {
            if !known.contains(&check.as_str()) {
                return Err(MgleError::Config(format!(
                    "unknown check '{check}' for backend {:?}; known: {}",
                    self.backend,
                    known.join(", ")
                )));
            }
        }
        match (&self.backend, &self.system) {
            (Backend::Matrix, SystemConfig::Matrix(_)) => {}
            (Backend::Trajectory, SystemConfig::Trajectory(_)) => {}
            (Backend::Nonstationary, SystemConfig::Nonstationary(_)) => {}
            _ => {
                return Err(MgleError::Config(
                    "system block does not match the declared backend".into(),
                ))
            }
        }
        if self.backend == Backend::Trajectory && self.ensemble.is_none() {
            return Err(MgleError::Config(
                "trajectory backend requires an ensemble block (n, seed, substeps)".into(),
            ));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::from_span(self.grid.t_max, self.grid.dt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_matrix_config_parses() {
        let text = r#"{
            "schema": 1,
            "backend": "matrix",
            "grid": {"t_max": 1.0, "dt": 0.01},
            "system": {
                "dim": 2,
                "l": {"preset": "oscillator", "omega": 2.0},
                "weight": {"preset": "oscillator-gibbs", "omega": 2.0},
                "z": {"preset": "coordinate", "index": 0}
            },
            "checks": ["gle", "dyson"]
        }"#;
        let config = RunConfig::from_json(text).unwrap();
        assert_eq!(config.backend, Backend::Matrix);
        let SystemConfig::Matrix(m) = &config.system else {
            panic!("expected matrix system");
        };
        let space = m.build_space().unwrap();
        let model = m.build_model(&space).unwrap();
        assert!(model.is_skew_adjoint(1e-12));
    }

    #[test]
    fn unknown_check_is_rejected() {
        let text = r#"{
            "schema": 1,
            "backend": "matrix",
            "grid": {"t_max": 1.0, "dt": 0.01},
            "system": {"dim": 1, "l": [[[0.0, 0.0]]], "z": [[1.0, 0.0]]},
            "checks": ["frobnicate"]
        }"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.to_string().contains("frobnicate"), "{err}");
    }

    #[test]
    fn schema_version_is_enforced() {
        let text = r#"{
            "schema": 2,
            "backend": "matrix",
            "grid": {"t_max": 1.0, "dt": 0.01},
            "system": {"dim": 1, "l": [[[0.0, 0.0]]], "z": [[1.0, 0.0]]}
        }"#;
        assert!(RunConfig::from_json(text).is_err());
    }

    #[test]
    fn trajectory_requires_ensemble_block() {
        let text = r#"{
            "schema": 1,
            "backend": "trajectory",
            "grid": {"t_max": 1.0, "dt": 0.01},
            "system": {"preset": "harmonic-oscillator", "omega": 2.0, "beta": 1.0}
        }"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.to_string().contains("ensemble"), "{err}");
    }

    #[test]
    fn random_matrix_preset_normalizes_and_skews() {
        let system = MatrixSystem {
            dim: 8,
            l: MatrixSpec::Preset(MatrixPreset::Random {
                seed: 5,
                scale: 1.0,
                skew: true,
            }),
            weight: None,
            z: VectorSpec::Preset(VectorPreset::Random { seed: 6 }),
        };
        let space = system.build_space().unwrap();
        let model = system.build_model(&space).unwrap();
        assert!(model.is_skew_adjoint(1e-12));
        let norm = crate::linops::weighted_operator_norm(&space, model.matrix());
        assert!((norm - 1.0).abs() < 1e-10);
    }
}
