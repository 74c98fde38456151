//! Lattice models and quantum-statistical machinery: N distinguishable
//! particles on a 1-D chain of L sites with optional spin, nearest-neighbor
//! kinetic term, diagonal potentials; energy shells, macrostate
//! decompositions, Boltzmann entropy, and uniform states on subspaces.
//!
//! Units: hbar = 1, k_B = 1. The hopping amplitude for particle i is
//! t_i = 1 / (2 m_i dx^2); the kinetic term is the discrete Laplacian stencil
//! t_i (2 delta_{qq'} - delta_{q,q'+1} - delta_{q,q'-1}), diagonal included.
//!
//! Basis order: full index = spatial * spin_size + spin, where the spatial
//! index is lexicographic in particle sites (first particle most significant)
//! and likewise the spin index. This order is part of the on-disk contract.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{projector_onto, spectral_decompose, DensityMatrix, EigenSystem, Operator};
use crate::{tol, C64};

pub const DEFAULT_DIMENSION_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    HardWall,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Zero,
    /// V(x) = 0.5 * strength * (x - center)^2 per particle.
    Harmonic { strength: f64, center: f64 },
    /// Pairwise strength / sqrt(d^2 + softening^2), minimum-image distance
    /// on periodic chains.
    SoftCoulomb { strength: f64, softening: f64 },
}

/// Config-facing potential: a name plus optional parameters, so unknown
/// names fail with a dedicated error rather than a generic parse failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSpec {
    pub name: String,
    #[serde(default)]
    pub strength: f64,
    #[serde(default)]
    pub center: f64,
    #[serde(default)]
    pub softening: f64,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self {
            name: "zero".to_string(),
            strength: 0.0,
            center: 0.0,
            softening: 0.0,
        }
    }
}

impl PotentialSpec {
    pub fn resolve(&self) -> Result<Potential> {
        match self.name.as_str() {
            "zero" => Ok(Potential::Zero),
            "harmonic" => Ok(Potential::Harmonic {
                strength: self.strength,
                center: self.center,
            }),
            "soft-coulomb" => Ok(Potential::SoftCoulomb {
                strength: self.strength,
                softening: self.softening,
            }),
            other => Err(Error::UnknownPotential(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub mass: f64,
}

/// Declarative model description (the config schema for `model`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub particles: Vec<ParticleSpec>,
    pub sites: usize,
    pub spacing: f64,
    pub boundary: Boundary,
    #[serde(default = "default_spin")]
    pub spin: usize,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default = "default_cap")]
    pub dimension_cap: usize,
}

fn default_spin() -> usize {
    1
}

fn default_cap() -> usize {
    DEFAULT_DIMENSION_CAP
}

/// Built model: validated parameters, Hamiltonian, and its spectral
/// decomposition (computed once; everything downstream reuses it).
#[derive(Debug, Clone)]
pub struct LatticeModel {
    masses: Vec<f64>,
    sites: usize,
    spacing: f64,
    boundary: Boundary,
    spin: usize,
    potential: Potential,
    hopping: Vec<f64>,
    spatial_size: usize,
    spin_size: usize,
    hamiltonian: Operator,
    eigen: EigenSystem,
}

/// Validate a spec, assemble the Hamiltonian, and diagonalize it.
pub fn build_lattice_model(spec: &ModelSpec) -> Result<LatticeModel> {
    let n = spec.particles.len();
    if n == 0 {
        return Err(Error::InvalidModel("at least one particle required".into()));
    }
    for (i, p) in spec.particles.iter().enumerate() {
        if !(p.mass.is_finite() && p.mass > 0.0) {
            return Err(Error::InvalidModel(format!("particle {i} mass must be positive, got {}", p.mass)));
        }
    }
    if spec.sites < 2 {
        return Err(Error::InvalidModel(format!("need at least 2 sites, got {}", spec.sites)));
    }
    if !(spec.spacing.is_finite() && spec.spacing > 0.0) {
        return Err(Error::InvalidModel(format!("spacing must be positive, got {}", spec.spacing)));
    }
    if spec.spin == 0 {
        return Err(Error::InvalidModel("spin dimension must be at least 1".into()));
    }
    let cap = spec.dimension_cap;
    let mut size: u128 = 1;
    for _ in 0..n {
        size = size.saturating_mul(spec.sites as u128).saturating_mul(spec.spin as u128);
        if size > cap as u128 {
            return Err(Error::DimensionCapExceeded {
                size: size.min(usize::MAX as u128) as usize,
                cap,
            });
        }
    }
    let spatial_size = spec.sites.pow(n as u32);
    let spin_size = spec.spin.pow(n as u32);
    let potential = spec.potential.resolve()?;
    let masses: Vec<f64> = spec.particles.iter().map(|p| p.mass).collect();
    let hopping: Vec<f64> = masses.iter().map(|&m| 1.0 / (2.0 * m * spec.spacing * spec.spacing)).collect();

    let dim = spatial_size * spin_size;
    let mut h = DMatrix::<C64>::zeros(dim, dim);
    let l = spec.sites;
    for g in 0..spatial_size {
        let sites = decode_sites(g, n, l);
        // Diagonal: kinetic offset + potential.
        let mut diag: f64 = hopping.iter().map(|&t| 2.0 * t).sum();
        diag += potential_energy(&potential, &sites, spec.spacing, spec.boundary, l);
        for sigma in 0..spin_size {
            let a = g * spin_size + sigma;
            h[(a, a)] += C64::new(diag, 0.0);
        }
        // Hopping: -t_i between site neighbors of particle i, spin untouched.
        for i in 0..n {
            for dir in [-1_i64, 1] {
                let s = sites[i] as i64 + dir;
                let s_new = match spec.boundary {
                    Boundary::Periodic => Some(s.rem_euclid(l as i64) as usize),
                    Boundary::HardWall => {
                        if s < 0 || s >= l as i64 {
                            None
                        } else {
                            Some(s as usize)
                        }
                    }
                };
                let Some(s_new) = s_new else { continue };
                let mut neighbor_sites = sites.clone();
                neighbor_sites[i] = s_new;
                let g2 = encode_sites(&neighbor_sites, l);
                for sigma in 0..spin_size {
                    h[(g2 * spin_size + sigma, g * spin_size + sigma)] += C64::new(-hopping[i], 0.0);
                }
            }
        }
    }
    let hamiltonian = Operator::hermitian(h)?;
    let eigen = spectral_decompose(&hamiltonian)?;
    Ok(LatticeModel {
        masses,
        sites: spec.sites,
        spacing: spec.spacing,
        boundary: spec.boundary,
        spin: spec.spin,
        potential,
        hopping,
        spatial_size,
        spin_size,
        hamiltonian,
        eigen,
    })
}

fn potential_energy(v: &Potential, sites: &[usize], dx: f64, boundary: Boundary, l: usize) -> f64 {
    match v {
        Potential::Zero => 0.0,
        Potential::Harmonic { strength, center } => sites
            .iter()
            .map(|&s| {
                let d = s as f64 * dx - center;
                0.5 * strength * d * d
            })
            .sum(),
        Potential::SoftCoulomb { strength, softening } => {
            let mut acc = 0.0;
            for i in 0..sites.len() {
                for j in (i + 1)..sites.len() {
                    let mut d = (sites[i] as f64 - sites[j] as f64).abs() * dx;
                    if boundary == Boundary::Periodic {
                        d = d.min(l as f64 * dx - d);
                    }
                    acc += strength / (d * d + softening * softening).sqrt();
                }
            }
            acc
        }
    }
}

pub(crate) fn decode_sites(g: usize, n: usize, l: usize) -> Vec<usize> {
    let mut rest = g;
    let mut sites = vec![0usize; n];
    for i in (0..n).rev() {
        sites[i] = rest % l;
        rest /= l;
    }
    sites
}

pub(crate) fn encode_sites(sites: &[usize], l: usize) -> usize {
    sites.iter().fold(0usize, |acc, &s| acc * l + s)
}

impl LatticeModel {
    pub fn n_particles(&self) -> usize {
        self.masses.len()
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn mass(&self, i: usize) -> f64 {
        self.masses[i]
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Per-site spin dimension (1 = spinless).
    pub fn spin_k(&self) -> usize {
        self.spin
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn hopping(&self, i: usize) -> f64 {
        self.hopping[i]
    }

    /// L^N.
    pub fn spatial_size(&self) -> usize {
        self.spatial_size
    }

    /// spin^N.
    pub fn spin_size(&self) -> usize {
        self.spin_size
    }

    /// Full Hilbert-space dimension L^N * spin^N.
    pub fn basis_size(&self) -> usize {
        self.spatial_size * self.spin_size
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn eigen(&self) -> &EigenSystem {
        &self.eigen
    }

    /// Box length L * dx. Positions live in [0, box_length).
    pub fn box_length(&self) -> f64 {
        self.sites as f64 * self.spacing
    }

    /// Particle sites of a spatial index.
    pub fn sites_of(&self, g: usize) -> Vec<usize> {
        decode_sites(g, self.n_particles(), self.sites)
    }

    /// Spatial index of particle sites.
    pub fn index_of_sites(&self, sites: &[usize]) -> usize {
        encode_sites(sites, self.sites)
    }

    /// Per-particle spins of a spin index.
    pub fn spins_of(&self, sigma: usize) -> Vec<usize> {
        decode_sites(sigma, self.n_particles(), self.spin)
    }

    pub fn index_of_spins(&self, spins: &[usize]) -> usize {
        encode_sites(spins, self.spin)
    }

    /// Full basis index from (spatial, spin).
    pub fn flat_index(&self, g: usize, sigma: usize) -> usize {
        g * self.spin_size + sigma
    }

    /// Minimum-image distance between two positions (plain distance on
    /// hard-wall chains).
    pub fn distance(&self, a: f64, b: f64) -> f64 {
        let d = (a - b).abs();
        match self.boundary {
            Boundary::Periodic => d.min(self.box_length() - d),
            Boundary::HardWall => d,
        }
    }

    /// Map a continuum position into the box: wrap (periodic) or clamp
    /// (hard-wall, to just below the box edge).
    pub fn confine(&self, x: f64) -> f64 {
        let len = self.box_length();
        match self.boundary {
            Boundary::Periodic => x.rem_euclid(len),
            Boundary::HardWall => {
                let hi = f64::from_bits(len.to_bits() - 1);
                x.clamp(0.0, hi)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Subspaces
// ---------------------------------------------------------------------------

/// Span of an orthonormal basis inside the model's Hilbert space.
#[derive(Debug, Clone)]
pub struct Subspace {
    vectors: Vec<DVector<C64>>,
    projector: Operator,
    label: String,
}

impl Subspace {
    pub fn new(vectors: Vec<DVector<C64>>, ambient_dim: usize, label: impl Into<String>) -> Result<Self> {
        let projector = projector_onto(&vectors, ambient_dim)?;
        Ok(Self {
            vectors,
            projector,
            label: label.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.projector.dim()
    }

    pub fn basis(&self) -> &[DVector<C64>] {
        &self.vectors
    }

    pub fn projector(&self) -> &Operator {
        &self.projector
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Span of the energy eigenvectors with eigenvalue in [e, e + delta_e],
/// closed interval with a 1e-12 tie window at both edges.
pub fn energy_shell(model: &LatticeModel, e: f64, delta_e: f64) -> Result<Subspace> {
    if !delta_e.is_finite() || delta_e <= 0.0 {
        return Err(Error::InvalidArgument(format!("shell width must be positive, got {delta_e}")));
    }
    let lo = e - tol::SHELL_TIE;
    let hi = e + delta_e + tol::SHELL_TIE;
    let eig = model.eigen();
    let vectors: Vec<DVector<C64>> = eig
        .eigenvalues()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l >= lo && l <= hi)
        .map(|(k, _)| eig.eigenvector(k))
        .collect();
    if vectors.is_empty() {
        return Err(Error::EmptyShell { e, e_hi: e + delta_e });
    }
    let dim = model.basis_size();
    Subspace::new(vectors, dim, format!("shell[{e}, {}]", e + delta_e))
}

// ---------------------------------------------------------------------------
// Macrostates
// ---------------------------------------------------------------------------

/// Position-diagonal coarse-graining variable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Macrovariable {
    /// Number of particles on the left half of the chain (sites < L/2);
    /// cells nu = 0..=N.
    LeftCount,
    /// Explicit index sets over the full basis; must partition 0..dim.
    Custom { cells: Vec<Vec<usize>> },
}

/// One macrostate: a coordinate-aligned subspace plus its projector.
#[derive(Debug, Clone)]
pub struct MacroCell {
    pub label: String,
    pub value: i64,
    pub subspace: Subspace,
}

/// Ordered macrostate decomposition. Cells partition the full basis, so
/// projectors are mutually orthogonal and sum to the identity exactly.
#[derive(Debug, Clone)]
pub struct MacroDecomposition {
    cells: Vec<MacroCell>,
    variable: String,
}

impl MacroDecomposition {
    pub fn cells(&self) -> &[MacroCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    pub fn ambient_dim(&self) -> usize {
        self.cells[0].subspace.ambient_dim()
    }

    /// Index of the cell with the largest dimension (first wins ties).
    pub fn equilibrium_index(&self) -> usize {
        let mut best = 0;
        for (k, c) in self.cells.iter().enumerate() {
            if c.subspace.dim() > self.cells[best].subspace.dim() {
                best = k;
            }
        }
        best
    }
}

fn coordinate_vector(dim: usize, k: usize) -> DVector<C64> {
    DVector::from_fn(dim, |i, _| if i == k { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) })
}

/// Build the macrostate decomposition for `variable` on `model`.
pub fn macro_decomposition(model: &LatticeModel, variable: &Macrovariable) -> Result<MacroDecomposition> {
    let dim = model.basis_size();
    let (index_sets, labels, values, name): (Vec<Vec<usize>>, Vec<String>, Vec<i64>, String) = match variable {
        Macrovariable::LeftCount => {
            let n = model.n_particles();
            let half = model.sites() / 2;
            let mut sets = vec![Vec::new(); n + 1];
            for g in 0..model.spatial_size() {
                let nu = model.sites_of(g).iter().filter(|&&s| s < half).count();
                for sigma in 0..model.spin_size() {
                    sets[nu].push(model.flat_index(g, sigma));
                }
            }
            let labels = (0..=n).map(|nu| format!("left={nu}")).collect();
            let values = (0..=n).map(|nu| nu as i64).collect();
            (sets, labels, values, "left-count".to_string())
        }
        Macrovariable::Custom { cells } => {
            let labels = (0..cells.len()).map(|k| format!("cell={k}")).collect();
            let values = (0..cells.len() as i64).collect();
            (cells.clone(), labels, values, "custom".to_string())
        }
    };

    // Partition check: every index 0..dim exactly once.
    let mut seen = vec![false; dim];
    for set in &index_sets {
        for &i in set {
            if i >= dim {
                return Err(Error::NotAPartition {
                    index: i,
                    problem: format!("out of range (dim {dim})"),
                });
            }
            if seen[i] {
                return Err(Error::NotAPartition {
                    index: i,
                    problem: "appears in more than one cell".to_string(),
                });
            }
            seen[i] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::NotAPartition {
            index: missing,
            problem: "missing from every cell".to_string(),
        });
    }

    let mut cells = Vec::with_capacity(index_sets.len());
    for ((set, label), value) in index_sets.iter().zip(labels).zip(values) {
        if set.is_empty() {
            // Empty macro cells cannot occur for left-count (both halves are
            // nonempty for L >= 2) and are rejected for custom partitions.
            return Err(Error::EmptyBasis);
        }
        let vectors: Vec<DVector<C64>> = set.iter().map(|&i| coordinate_vector(dim, i)).collect();
        cells.push(MacroCell {
            value,
            subspace: Subspace::new(vectors, dim, label.clone())?,
            label,
        });
    }
    Ok(MacroDecomposition { cells, variable: name })
}

/// Boltzmann entropy of a macro cell, ln(dim) with k_B = 1.
pub fn boltzmann_entropy(decomposition: &MacroDecomposition, cell: usize) -> Result<f64> {
    let c = decomposition
        .cells
        .get(cell)
        .ok_or(Error::IndexOutOfRange {
            index: cell,
            len: decomposition.cells.len(),
        })?;
    Ok((c.subspace.dim() as f64).ln())
}

/// Uniform density matrix on a subspace: P / dim(P). Purity is exactly
/// 1/dim(P); for the one-dimensional case this is the projector itself.
pub fn uniform_state(subspace: &Subspace) -> Result<DensityMatrix> {
    let d = subspace.dim() as f64;
    let m = subspace.projector().entries() / C64::new(d, 0.0);
    DensityMatrix::new(m)
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnsembleKind {
    /// Uniform state on the energy shell [e, e + delta_e].
    Microcanonical { e: f64, delta_e: f64 },
    /// exp(-beta H) / Z, computed in the eigenbasis with the spectrum
    /// shifted by its minimum for stability.
    Canonical { beta: f64 },
}

pub fn ensemble_state(model: &LatticeModel, kind: EnsembleKind) -> Result<DensityMatrix> {
    match kind {
        EnsembleKind::Microcanonical { e, delta_e } => uniform_state(&energy_shell(model, e, delta_e)?),
        EnsembleKind::Canonical { beta } => {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(Error::InvalidArgument(format!("beta must be finite and nonnegative, got {beta}")));
            }
            let eig = model.eigen();
            let e0 = eig.eigenvalues()[0];
            let weights: Vec<f64> = eig.eigenvalues().iter().map(|&l| (-beta * (l - e0)).exp()).collect();
            let z: f64 = weights.iter().sum();
            let dim = model.basis_size();
            let q = eig.eigenvectors();
            let mut m = DMatrix::zeros(dim, dim);
            for (k, &w) in weights.iter().enumerate() {
                let col = q.column(k);
                let p = w / z;
                for i in 0..dim {
                    for j in 0..dim {
                        m[(i, j)] += col[i] * col[j].conj() * p;
                    }
                }
            }
            DensityMatrix::new(m)
        }
    }
}
