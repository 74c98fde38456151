//! Declarative experiment configs: JSON with a top-level `experiment` tag
//! selecting the run type, everything else validated strictly (unknown
//! fields are errors).

use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::Schedule;
use crate::error::{Error, Result};
use crate::grw::GrwParams;
use crate::hilbert::{make_density, DensityMatrix, PureState};
use crate::model::{
    ensemble_state, macro_decomposition, uniform_state, EnsembleKind, LatticeModel, Macrovariable, ModelSpec,
};
use crate::C64;

/// Pure-state constructors addressable from configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PureStateSpec {
    /// Product of single-particle plane waves with integer mode m_i per
    /// particle (wavenumber 2 pi m_i / L); spin component 0.
    PlaneWave { modes: Vec<i64> },
    /// One basis vector: particle i at sites[i] with spin spins[i]
    /// (spins default to all 0).
    Localized {
        sites: Vec<usize>,
        #[serde(default)]
        spins: Vec<usize>,
    },
    /// Uniform superposition over configurations with every particle
    /// strictly in the left half of the chain; spin component 0.
    LeftHalf,
    /// Product of identical Gaussian wave packets exp(-d^2/4w^2 + i p x);
    /// distances are minimum-image on periodic chains; spin component 0.
    Gaussian { center: f64, width: f64, momentum: f64 },
    /// Raw amplitudes [re, im] over the full basis; normalized on load.
    Amplitudes { values: Vec<[f64; 2]> },
}

impl PureStateSpec {
    pub fn resolve(&self, model: &LatticeModel) -> Result<PureState> {
        let dim = model.basis_size();
        let zero = C64::new(0.0, 0.0);
        match self {
            PureStateSpec::PlaneWave { modes } => {
                if modes.len() != model.n_particles() {
                    return Err(Error::Config(format!(
                        "plane wave needs one mode per particle ({}), got {}",
                        model.n_particles(),
                        modes.len()
                    )));
                }
                let l = model.sites() as f64;
                let mut amps = DVector::from_element(dim, zero);
                for g in 0..model.spatial_size() {
                    let phase: f64 = model
                        .sites_of(g)
                        .iter()
                        .zip(modes)
                        .map(|(&s, &m)| 2.0 * std::f64::consts::PI * m as f64 * s as f64 / l)
                        .sum();
                    amps[model.flat_index(g, 0)] = C64::from_polar(1.0, phase);
                }
                PureState::normalized(amps)
            }
            PureStateSpec::Localized { sites, spins } => {
                if sites.len() != model.n_particles() {
                    return Err(Error::Config(format!(
                        "localized state needs one site per particle ({}), got {}",
                        model.n_particles(),
                        sites.len()
                    )));
                }
                let spins = if spins.is_empty() {
                    vec![0; model.n_particles()]
                } else {
                    spins.clone()
                };
                if spins.len() != model.n_particles() {
                    return Err(Error::Config("localized spins must match the particle count".into()));
                }
                if sites.iter().any(|&s| s >= model.sites()) || spins.iter().any(|&s| s >= model.spin_k()) {
                    return Err(Error::Config("localized site or spin out of range".into()));
                }
                let mut amps = DVector::from_element(dim, zero);
                amps[model.flat_index(model.index_of_sites(sites), model.index_of_spins(&spins))] =
                    C64::new(1.0, 0.0);
                PureState::new(amps)
            }
            PureStateSpec::LeftHalf => {
                let mut amps = DVector::from_element(dim, zero);
                let mut hit = false;
                for g in 0..model.spatial_size() {
                    if model.sites_of(g).iter().all(|&s| 2 * s < model.sites()) {
                        amps[model.flat_index(g, 0)] = C64::new(1.0, 0.0);
                        hit = true;
                    }
                }
                if !hit {
                    return Err(Error::Config("left half of the chain is empty".into()));
                }
                PureState::normalized(amps)
            }
            PureStateSpec::Gaussian { center, width, momentum } => {
                if !(width.is_finite() && *width > 0.0) {
                    return Err(Error::Config(format!("gaussian width must be positive, got {width}")));
                }
                let dx = model.spacing();
                let mut amps = DVector::from_element(dim, zero);
                for g in 0..model.spatial_size() {
                    let mut mag = 1.0;
                    let mut phase = 0.0;
                    for &s in &model.sites_of(g) {
                        let x = s as f64 * dx;
                        let d = model.distance(x, *center);
                        mag *= (-d * d / (4.0 * width * width)).exp();
                        phase += momentum * x;
                    }
                    amps[model.flat_index(g, 0)] = C64::from_polar(mag, phase);
                }
                PureState::normalized(amps)
            }
            PureStateSpec::Amplitudes { values } => {
                if values.len() != dim {
                    return Err(Error::Config(format!(
                        "amplitude list has {} entries, basis has {dim}",
                        values.len()
                    )));
                }
                let amps = DVector::from_fn(dim, |i, _| C64::new(values[i][0], values[i][1]));
                if amps.norm() < 1e-12 {
                    return Err(Error::Config("amplitudes have zero norm".into()));
                }
                PureState::normalized(amps)
            }
        }
    }
}

/// A weighted pure component of a statistical mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedPure {
    pub weight: f64,
    pub state: PureStateSpec,
}

/// Initial-state constructors addressable from configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StateSpec {
    /// I / dim over the full basis.
    MaximallyMixed,
    /// Uniform state on the energy shell [e, e + delta_e].
    Microcanonical { e: f64, delta_e: f64 },
    /// exp(-beta H) / Z.
    Canonical { beta: f64 },
    /// Uniform state on one cell of a macrostate decomposition.
    MacroCell { macrovariable: Macrovariable, cell: usize },
    /// Statistical mixture of pure states; weights must sum to 1.
    Mixture { components: Vec<WeightedPure> },
    /// A single pure state (as its projector when a density matrix is
    /// required).
    Pure { state: PureStateSpec },
}

pub(crate) fn validated_weights(components: &[WeightedPure]) -> Result<Vec<f64>> {
    if components.is_empty() {
        return Err(Error::Config("mixture needs at least one component".into()));
    }
    let weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
    if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
        return Err(Error::Config("mixture weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
    }
    Ok(weights)
}

impl StateSpec {
    pub fn resolve(&self, model: &LatticeModel) -> Result<DensityMatrix> {
        match self {
            StateSpec::MaximallyMixed => DensityMatrix::maximally_mixed(model.basis_size()),
            StateSpec::Microcanonical { e, delta_e } => {
                ensemble_state(model, EnsembleKind::Microcanonical { e: *e, delta_e: *delta_e })
            }
            StateSpec::Canonical { beta } => ensemble_state(model, EnsembleKind::Canonical { beta: *beta }),
            StateSpec::MacroCell { macrovariable, cell } => {
                let decomp = macro_decomposition(model, macrovariable)?;
                let c = decomp.cells().get(*cell).ok_or(Error::IndexOutOfRange {
                    index: *cell,
                    len: decomp.len(),
                })?;
                uniform_state(&c.subspace)
            }
            StateSpec::Mixture { components } => {
                let weights = validated_weights(components)?;
                let states: Vec<PureState> = components
                    .iter()
                    .map(|c| c.state.resolve(model))
                    .collect::<Result<_>>()?;
                make_density(&weights, &states)
            }
            StateSpec::Pure { state } => state.resolve(model)?.projector(),
        }
    }

    /// The pure state when this spec is a pure one; None otherwise.
    pub fn resolve_pure(&self, model: &LatticeModel) -> Result<Option<PureState>> {
        match self {
            StateSpec::Pure { state } => Ok(Some(state.resolve(model)?)),
            _ => Ok(None),
        }
    }
}

fn default_seed() -> u64 {
    0
}

fn default_tv_threshold() -> f64 {
    0.05
}

/// Evolve a state on the schedule grid; record conserved quantities and
/// optional macro occupation and mass-density curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    pub model: ModelSpec,
    pub state: StateSpec,
    pub schedule: Schedule,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub macrovariable: Option<Macrovariable>,
    #[serde(default)]
    pub mass_density: bool,
}

/// Trajectory ensemble with per-checkpoint total-variation comparison of the
/// empirical cell histogram against diag W(t).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BohmConfig {
    pub model: ModelSpec,
    pub state: StateSpec,
    pub schedule: Schedule,
    pub checkpoints: Vec<f64>,
    pub trajectories: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_tv_threshold")]
    pub tv_threshold: f64,
    #[serde(default)]
    pub emit_trajectories: bool,
}

/// Spontaneous-collapse run: Poisson events to t_end, snapshots at the
/// checkpoints, flash record as CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrwConfig {
    pub model: ModelSpec,
    pub state: StateSpec,
    pub params: GrwParams,
    pub t_end: f64,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mass_density: bool,
}

/// Time-average band check on the equilibrium occupation over [t_min, t_max].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandCheck {
    pub t_min: f64,
    pub t_max: f64,
    pub target: f64,
    pub tolerance: f64,
}

/// Floor check: min over the schedule grid of the equilibrium occupation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FloorCheck {
    pub floor: f64,
}

/// Macro occupation and Boltzmann-entropy curves with optional statistical
/// band/floor checks and optional pure-state sub-ensembles.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropyConfig {
    pub model: ModelSpec,
    pub macrovariable: Macrovariable,
    pub state: StateSpec,
    pub schedule: Schedule,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub band: Option<BandCheck>,
    #[serde(default)]
    pub floor: Option<FloorCheck>,
    #[serde(default)]
    pub psi_samples: Option<usize>,
}

/// Two-arm comparison: trajectories guided by per-sample pure states drawn
/// from a mixture (arm A) against trajectories guided by the mixture's
/// density matrix (arm B), tested per checkpoint and particle with a
/// two-sample KS test. `corrupt_arm_b` replaces arm B's mixture weights to
/// demonstrate detection power.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivalenceConfig {
    pub model: ModelSpec,
    pub components: Vec<WeightedPure>,
    pub schedule: Schedule,
    pub checkpoints: Vec<f64>,
    pub trajectories: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub corrupt_arm_b: Option<Vec<f64>>,
}

/// Prepare the uniform state on one macro cell, verify its algebraic
/// properties, then evolve it and record the occupation curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareConfig {
    pub model: ModelSpec,
    pub macrovariable: Macrovariable,
    pub cell: usize,
    pub schedule: Schedule,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// A parsed experiment config of any type.
#[derive(Debug, Clone)]
pub enum ExperimentConfig {
    Evolve(EvolveConfig),
    Bohm(BohmConfig),
    Grw(GrwConfig),
    Entropy(EntropyConfig),
    Equivalence(EquivalenceConfig),
    Prepare(PrepareConfig),
}

fn from_value<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

impl ExperimentConfig {
    /// Parse a JSON config; the top-level `experiment` field selects the
    /// type, the rest must match that type's schema exactly.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let Value::Object(mut map) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let tag = map
            .remove("experiment")
            .ok_or_else(|| Error::Config("missing \"experiment\" field".into()))?;
        let Value::String(tag) = tag else {
            return Err(Error::Config("\"experiment\" must be a string".into()));
        };
        let rest = Value::Object(map);
        match tag.as_str() {
            "evolve" => Ok(Self::Evolve(from_value(rest)?)),
            "bohm" => Ok(Self::Bohm(from_value(rest)?)),
            "grw" => Ok(Self::Grw(from_value(rest)?)),
            "entropy" => Ok(Self::Entropy(from_value(rest)?)),
            "equivalence" => Ok(Self::Equivalence(from_value(rest)?)),
            "prepare" => Ok(Self::Prepare(from_value(rest)?)),
            other => Err(Error::Config(format!("unknown experiment '{other}'"))),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Evolve(_) => "evolve",
            Self::Bohm(_) => "bohm",
            Self::Grw(_) => "grw",
            Self::Entropy(_) => "entropy",
            Self::Equivalence(_) => "equivalence",
            Self::Prepare(_) => "prepare",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Evolve(c) => c.seed,
            Self::Bohm(c) => c.seed,
            Self::Grw(c) => c.seed,
            Self::Entropy(c) => c.seed,
            Self::Equivalence(c) => c.seed,
            Self::Prepare(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Self::Evolve(c) => c.seed = seed,
            Self::Bohm(c) => c.seed = seed,
            Self::Grw(c) => c.seed = seed,
            Self::Entropy(c) => c.seed = seed,
            Self::Equivalence(c) => c.seed = seed,
            Self::Prepare(c) => c.seed = seed,
        }
    }
}

/// Human-readable config schema, printed by the CLI's `--schema` flag.
pub const CONFIG_SCHEMA: &str = r#"Experiment configs are JSON objects with a top-level "experiment" tag.
Unknown fields are rejected. Shared blocks:

  model:
    particles      [{"mass": f64 > 0}, ...]        one entry per particle
    sites          usize >= 2                      lattice length L
    spacing        f64 > 0                         dx
    boundary       "periodic" | "hard-wall"
    spin           usize >= 1                      per-particle spin dimension (default 1)
    potential      {"name": "zero"}                                  (default)
                   {"name": "harmonic", "strength": f64, "center": f64}
                   {"name": "soft-coulomb", "strength": f64, "softening": f64}
    dimension_cap  usize                           basis-size guard (default 4096)

  schedule:  {"t_start": f64, "t_end": f64, "steps": usize >= 1}

  macrovariable:
    {"kind": "left-count"}                         cells nu = #particles in left half
    {"kind": "custom", "cells": [[usize, ...], ...]}   partition of the full basis

  pure state (state constructors of kind "pure" and mixture components):
    {"kind": "plane-wave", "modes": [i64; N]}
    {"kind": "localized", "sites": [usize; N], "spins": [usize; N]?}
    {"kind": "left-half"}
    {"kind": "gaussian", "center": f64, "width": f64 > 0, "momentum": f64}
    {"kind": "amplitudes", "values": [[re, im]; dim]}

  state:
    {"kind": "maximally-mixed"}
    {"kind": "microcanonical", "e": f64, "delta_e": f64 > 0}
    {"kind": "canonical", "beta": f64 >= 0}
    {"kind": "macro-cell", "macrovariable": ..., "cell": usize}
    {"kind": "mixture", "components": [{"weight": f64, "state": <pure>}, ...]}  weights sum to 1
    {"kind": "pure", "state": <pure>}

Experiments (all accept "seed": u64, default 0; the CLI --seed overrides it):

  evolve       model, state, schedule, macrovariable?, mass_density? (bool)
               -> report.json, final_state.json, curve.csv?, mass_density.csv?

  bohm         model, state, schedule, checkpoints [f64 on the grid],
               trajectories (>= 100), tv_threshold? (default 0.05),
               emit_trajectories? (bool)
               -> report.json, trajectories.csv?

  grw          model, state, params {"lambda": f64 >= 0, "sigma": f64 > 0},
               t_end, checkpoints? [f64], mass_density? (bool)
               -> report.json, flashes.csv, final_state.json, mass_density.csv?

  entropy      model, macrovariable, state, schedule,
               band? {t_min, t_max, target, tolerance},
               floor? {floor}, psi_samples? (usize)
               -> report.json, curve.csv, psi_curves.csv?

  equivalence  model, components [{weight, state}] (weights sum to 1),
               schedule, checkpoints, trajectories (>= 100),
               corrupt_arm_b? [f64 per component]
               -> report.json

  prepare      model, macrovariable, cell (index), schedule
               -> report.json, curve.csv

Exit codes: 0 all checks passed, 1 a statistical check failed,
2 config/usage error, 3 numerical fault.
"#;
