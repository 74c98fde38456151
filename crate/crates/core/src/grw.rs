//! Spontaneous-collapse dynamics for density matrices and pure states.
//! Collapses arrive as a Poisson process of total rate N * lambda; each event
//! picks a particle uniformly, draws a collapse center x from
//! rho(x_s) = tr(W Lambda_k(x_s)) over lattice sites, and maps
//!
//!   W  ->  Lambda_k(x)^(1/2) W Lambda_k(x)^(1/2) / tr(W Lambda_k(x)),
//!
//! where Lambda_k(x) is the diagonal Gaussian rate operator of width sigma
//! centered at x (minimum-image distance on periodic models). The pure-state
//! route applies the same map to psi psi†. Between events the state evolves
//! unitarily; the history of collapse centers is the flash record.
//!
//! The physically motivated constants are of order lambda ~ 1e-15 per second
//! and sigma ~ 1e-7 m; simulations here default to lambda = 0.1 and
//! sigma = 2 dx so that collapse effects are visible on small lattices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{mass_density, propagator, MassDensityField};
use crate::error::{Error, Result};
use crate::hilbert::{DensityMatrix, Operator, PureState};
use crate::model::LatticeModel;
use crate::rng::{stream_rng, StreamKind};
use crate::{tol, C64};

/// Collapse rate lambda (per particle per unit time) and localization width
/// sigma (in position units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrwParams {
    pub lambda: f64,
    pub sigma: f64,
}

impl GrwParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "collapse rate must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "collapse width must be finite and positive, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Defaults that make collapses visible on small lattices.
    pub fn simulation_default(model: &LatticeModel) -> Self {
        Self {
            lambda: 0.1,
            sigma: 2.0 * model.spacing(),
        }
    }
}

/// 1-D Gaussian collapse kernel (2 pi sigma^2)^(-1/2) exp(-d^2 / 2 sigma^2).
fn gauss(d: f64, sigma: f64) -> f64 {
    let norm = (2.0 * std::f64::consts::PI * sigma * sigma).sqrt();
    (-d * d / (2.0 * sigma * sigma)).exp() / norm
}

/// Diagonal kernel values lambda_b(x) over the full basis for particle k
/// centered at x.
fn kernel_diagonal(model: &LatticeModel, particle: usize, x: f64, sigma: f64) -> Result<Vec<f64>> {
    if particle >= model.n_particles() {
        return Err(Error::IndexOutOfRange {
            index: particle,
            len: model.n_particles(),
        });
    }
    let x = model.confine(x);
    let spin = model.spin_size();
    let mut diag = vec![0.0; model.basis_size()];
    for g in 0..model.spatial_size() {
        let site = model.sites_of(g)[particle];
        let v = gauss(model.distance(site as f64 * model.spacing(), x), sigma);
        for sigma_idx in 0..spin {
            diag[model.flat_index(g, sigma_idx)] = v;
        }
    }
    Ok(diag)
}

/// The collapse rate operator Lambda_k(x) as a dense diagonal operator.
pub fn collapse_rate_operator(model: &LatticeModel, particle: usize, x: f64, params: &GrwParams) -> Result<Operator> {
    params.validate()?;
    let diag = kernel_diagonal(model, particle, x, params.sigma)?;
    let m = DMatrix::from_diagonal(&DVector::from_iterator(
        diag.len(),
        diag.iter().map(|&v| C64::new(v, 0.0)),
    ));
    Operator::hermitian(m)
}

/// Worst-case deviation of the discretized completeness sum
/// sum_s lambda_b(x_s) dx from 1 over all basis points b. The kernel depends
/// only on site distance, so this is the same for every particle.
pub fn completeness_defect(model: &LatticeModel, params: &GrwParams) -> Result<f64> {
    params.validate()?;
    let dx = model.spacing();
    let mut worst = 0.0f64;
    for b_site in 0..model.sites() {
        let xb = b_site as f64 * dx;
        let total: f64 = (0..model.sites())
            .map(|s| gauss(model.distance(xb, s as f64 * dx), params.sigma) * dx)
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    Ok(worst)
}

/// Unnormalized center law rho_s = tr(W Lambda_k(x_s)) over lattice sites,
/// computed from the position diagonal.
pub(crate) fn center_weights(diag: &[f64], model: &LatticeModel, particle: usize, sigma: f64) -> Vec<f64> {
    let dx = model.spacing();
    let spin = model.spin_size();
    // P(particle k at site s), spin and other particles summed.
    let mut marginal = vec![0.0; model.sites()];
    for g in 0..model.spatial_size() {
        let site = model.sites_of(g)[particle];
        for sg in 0..spin {
            marginal[site] += diag[model.flat_index(g, sg)].max(0.0);
        }
    }
    (0..model.sites())
        .map(|s| {
            let xs = s as f64 * dx;
            marginal
                .iter()
                .enumerate()
                .map(|(b, &p)| p * gauss(model.distance(b as f64 * dx, xs), sigma))
                .sum()
        })
        .collect()
}

fn diag_of_density(w: &DensityMatrix) -> Vec<f64> {
    w.diagonal_real()
}

fn diag_of_pure(psi: &PureState) -> Vec<f64> {
    (0..psi.dim()).map(|b| psi.amplitude(b).norm_sqr()).collect()
}

/// One flash: the spacetime point left behind by a collapse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flash {
    pub t: f64,
    pub particle: usize,
    pub center: f64,
    pub kind: FlashKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlashKind {
    W,
    Psi,
}

impl std::fmt::Display for FlashKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlashKind::W => write!(f, "w"),
            FlashKind::Psi => write!(f, "psi"),
        }
    }
}

fn draw_center(weights: &[f64], rng: &mut impl rand::Rng) -> Result<(usize, f64)> {
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Numerical(format!("collapse center law has total weight {total}")));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok((s, w));
        }
    }
    Ok((weights.len() - 1, weights[weights.len() - 1]))
}

/// Collapse a density matrix at a forced center site. The norm is
/// tr(W Lambda); degenerate norms are rejected.
pub(crate) fn w_collapse_at(
    w: &DensityMatrix,
    model: &LatticeModel,
    particle: usize,
    center_site: usize,
    sigma: f64,
) -> Result<DensityMatrix> {
    let x = center_site as f64 * model.spacing();
    let kernel = kernel_diagonal(model, particle, x, sigma)?;
    let diag = diag_of_density(w);
    let norm: f64 = kernel.iter().zip(&diag).map(|(&l, &p)| l * p.max(0.0)).sum();
    if norm < tol::DEGENERATE_COLLAPSE {
        return Err(Error::DegenerateDensity { attempts: 1 });
    }
    let sqrt: Vec<f64> = kernel.iter().map(|&l| l.sqrt()).collect();
    let n = w.dim();
    let mut m = DMatrix::<C64>::zeros(n, n);
    for b in 0..n {
        for c in 0..n {
            m[(b, c)] = w.entry(b, c) * (sqrt[b] * sqrt[c] / norm);
        }
    }
    DensityMatrix::new(m)
}

/// Collapse a pure state at a forced center site.
pub(crate) fn psi_collapse_at(
    psi: &PureState,
    model: &LatticeModel,
    particle: usize,
    center_site: usize,
    sigma: f64,
) -> Result<PureState> {
    let x = center_site as f64 * model.spacing();
    let kernel = kernel_diagonal(model, particle, x, sigma)?;
    let norm: f64 = kernel
        .iter()
        .enumerate()
        .map(|(b, &l)| l * psi.amplitude(b).norm_sqr())
        .sum();
    if norm < tol::DEGENERATE_COLLAPSE {
        return Err(Error::DegenerateDensity { attempts: 1 });
    }
    let scale = 1.0 / norm.sqrt();
    let amps = DVector::from_fn(psi.dim(), |b, _| psi.amplitude(b) * C64::new(kernel[b].sqrt() * scale, 0.0));
    PureState::new(amps)
}

fn sample_center(
    weights: &[f64],
    rng: &mut impl rand::Rng,
) -> Result<usize> {
    // Resample degenerate draws; a center whose norm underflows cannot
    // produce a valid post-collapse state.
    for attempt in 1..=100u32 {
        let (site, w) = draw_center(weights, rng)?;
        if w >= tol::DEGENERATE_COLLAPSE {
            return Ok(site);
        }
        if attempt == 100 {
            return Err(Error::DegenerateDensity { attempts: attempt as usize });
        }
    }
    unreachable!()
}

/// One collapse of a density matrix: draw a center from tr(W Lambda_k(x_s)),
/// apply the map, return the new state and the flash.
pub fn w_collapse(
    w: &DensityMatrix,
    model: &LatticeModel,
    particle: usize,
    params: &GrwParams,
    t: f64,
    rng: &mut impl rand::Rng,
) -> Result<(DensityMatrix, Flash)> {
    params.validate()?;
    let weights = center_weights(&diag_of_density(w), model, particle, params.sigma);
    let site = sample_center(&weights, rng)?;
    let post = w_collapse_at(w, model, particle, site, params.sigma)?;
    let flash = Flash {
        t,
        particle,
        center: site as f64 * model.spacing(),
        kind: FlashKind::W,
    };
    Ok((post, flash))
}

/// One collapse of a pure state; the center law is the same functional of
/// the position diagonal as in the density route.
pub fn psi_collapse(
    psi: &PureState,
    model: &LatticeModel,
    particle: usize,
    params: &GrwParams,
    t: f64,
    rng: &mut impl rand::Rng,
) -> Result<(PureState, Flash)> {
    params.validate()?;
    let weights = center_weights(&diag_of_pure(psi), model, particle, params.sigma);
    let site = sample_center(&weights, rng)?;
    let post = psi_collapse_at(psi, model, particle, site, params.sigma)?;
    let flash = Flash {
        t,
        particle,
        center: site as f64 * model.spacing(),
        kind: FlashKind::Psi,
    };
    Ok((post, flash))
}

/// A scheduled collapse: time and particle label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseEvent {
    pub t: f64,
    pub particle: usize,
}

/// Poisson schedule of total rate n * lambda on (0, t_end]; each event gets
/// a uniform particle label.
pub fn sample_collapse_schedule(
    n_particles: usize,
    params: &GrwParams,
    t_end: f64,
    rng: &mut impl rand::Rng,
) -> Result<Vec<CollapseEvent>> {
    params.validate()?;
    if n_particles == 0 {
        return Err(Error::InvalidArgument("no particles".into()));
    }
    if !t_end.is_finite() || t_end <= 0.0 {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    let rate = n_particles as f64 * params.lambda;
    let mut events = Vec::new();
    if rate == 0.0 {
        return Ok(events);
    }
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random();
        t += -(1.0 - u).ln() / rate;
        if t > t_end {
            break;
        }
        events.push(CollapseEvent {
            t,
            particle: rng.random_range(0..n_particles),
        });
    }
    Ok(events)
}

/// Initial state of a collapse run.
#[derive(Debug, Clone)]
pub enum GrwInitial {
    Density(DensityMatrix),
    Pure(PureState),
}

#[derive(Debug, Clone)]
enum GrwState {
    Density(DensityMatrix),
    Pure(PureState),
}

impl GrwState {
    fn evolve(&self, model: &LatticeModel, dt: f64) -> Result<Self> {
        if dt == 0.0 {
            return Ok(self.clone());
        }
        let u = propagator(model, dt)?;
        Ok(match self {
            GrwState::Density(w) => GrwState::Density(u.apply_density(w)?),
            GrwState::Pure(psi) => GrwState::Pure(u.apply_pure(psi)?),
        })
    }

    fn as_density(&self) -> Result<DensityMatrix> {
        match self {
            GrwState::Density(w) => Ok(w.clone()),
            GrwState::Pure(psi) => psi.projector(),
        }
    }

    fn digest(&self) -> String {
        let bytes = match self {
            GrwState::Density(w) => serde_json::to_vec(w),
            GrwState::Pure(psi) => serde_json::to_vec(psi),
        }
        .expect("state serialization cannot fail");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        format!("{:x}", hasher.finalize())
    }
}

/// Audit record of one collapse: SHA-256 of the serialized state before and
/// after. Kept in memory only.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDigest {
    pub index: usize,
    pub t: f64,
    pub pre: String,
    pub post: String,
}

/// Snapshot of the (density-matrix) state at a checkpoint.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub t: f64,
    pub state: DensityMatrix,
}

/// Result of a collapse run.
#[derive(Debug, Clone)]
pub struct GrwRun {
    pub flashes: Vec<Flash>,
    pub snapshots: Vec<Snapshot>,
    pub mass_density: Option<Vec<MassDensityField>>,
    pub event_digests: Vec<EventDigest>,
}

/// Run collapse dynamics to t_end with an externally supplied schedule.
/// Events at a checkpoint time are processed before the checkpoint is
/// recorded. Collapse centers draw from per-event RNG streams.
pub(crate) fn run_grw_with_schedule(
    model: &LatticeModel,
    init: &GrwInitial,
    params: &GrwParams,
    events: &[CollapseEvent],
    checkpoints: &[f64],
    master_seed: u64,
    with_mass_density: bool,
) -> Result<GrwRun> {
    params.validate()?;
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing".into()));
    }
    if checkpoints.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidArgument("checkpoints must be nonnegative".into()));
    }
    if events.windows(2).any(|w| w[0].t > w[1].t) {
        return Err(Error::InvalidArgument("events must be time-ordered".into()));
    }

    let mut state = match init {
        GrwInitial::Density(w) => {
            if w.dim() != model.basis_size() {
                return Err(Error::DimensionMismatch {
                    expected: model.basis_size(),
                    got: w.dim(),
                });
            }
            GrwState::Density(w.clone())
        }
        GrwInitial::Pure(psi) => {
            if psi.dim() != model.basis_size() {
                return Err(Error::DimensionMismatch {
                    expected: model.basis_size(),
                    got: psi.dim(),
                });
            }
            GrwState::Pure(psi.clone())
        }
    };

    let mut flashes = Vec::with_capacity(events.len());
    let mut snapshots = Vec::with_capacity(checkpoints.len());
    let mut densities = Vec::new();
    let mut digests = Vec::with_capacity(events.len());
    let mut t_cur = 0.0;
    let mut ei = 0;
    let mut ci = 0;

    while ei < events.len() || ci < checkpoints.len() {
        // Events win ties so checkpoints see the post-collapse state.
        let take_event = match (events.get(ei), checkpoints.get(ci)) {
            (Some(e), Some(&c)) => e.t <= c,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if take_event {
            let e = events[ei];
            state = state.evolve(model, e.t - t_cur)?;
            t_cur = e.t;
            let pre = state.digest();
            let mut rng = stream_rng(master_seed, StreamKind::CollapseCenter, ei as u64);
            let (next, flash) = match &state {
                GrwState::Density(w) => {
                    let (post, flash) = w_collapse(w, model, e.particle, params, e.t, &mut rng)?;
                    (GrwState::Density(post), flash)
                }
                GrwState::Pure(psi) => {
                    let (post, flash) = psi_collapse(psi, model, e.particle, params, e.t, &mut rng)?;
                    (GrwState::Pure(post), flash)
                }
            };
            state = next;
            digests.push(EventDigest {
                index: ei,
                t: e.t,
                pre,
                post: state.digest(),
            });
            flashes.push(flash);
            ei += 1;
        } else {
            let c = checkpoints[ci];
            state = state.evolve(model, c - t_cur)?;
            t_cur = c;
            let w = state.as_density()?;
            if with_mass_density {
                densities.push(mass_density(&w, model, c)?);
            }
            snapshots.push(Snapshot { t: c, state: w });
            ci += 1;
        }
    }

    Ok(GrwRun {
        flashes,
        snapshots,
        mass_density: with_mass_density.then_some(densities),
        event_digests: digests,
    })
}

/// Full collapse run: sample the Poisson schedule from the master seed, then
/// step through events and checkpoints.
pub fn run_grw(
    model: &LatticeModel,
    init: &GrwInitial,
    params: &GrwParams,
    t_end: f64,
    checkpoints: &[f64],
    master_seed: u64,
    with_mass_density: bool,
) -> Result<GrwRun> {
    if !t_end.is_finite() || t_end <= 0.0 {
        return Err(Error::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    if checkpoints.iter().any(|&t| t > t_end) {
        return Err(Error::InvalidArgument("checkpoints must lie within [0, t_end]".into()));
    }
    let mut schedule_rng = stream_rng(master_seed, StreamKind::CollapseSchedule, 0);
    let events = sample_collapse_schedule(model.n_particles(), params, t_end, &mut schedule_rng)?;
    run_grw_with_schedule(model, init, params, &events, checkpoints, master_seed, with_mass_density)
}
