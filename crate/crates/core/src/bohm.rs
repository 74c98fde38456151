//! Particle trajectories guided by the quantum state. The velocity of
//! particle i at configuration Q is
//!
//!   v_i = (1/m_i) Im[ grad_i W(q, q') / W(q, q') ]  at q = q' = Q,
//!
//! with the gradient acting on the first argument. On a spin model the spin
//! factor is traced out of W before the ratio. For a pure state W = psi psi†
//! this reduces to the usual wavefunction guidance at grid points.
//!
//! Discretization: gradients are central differences on the lattice
//! (amplitudes beyond a hard wall are 0), both numerator and denominator are
//! interpolated multilinearly to the continuum configuration, and only then
//! is the imaginary part of the ratio taken. Where the denominator falls
//! below a relative node floor the velocity is defined as 0. Configurations
//! are sampled from the position diagonal of W with uniform jitter inside a
//! lattice cell, and integrated with fixed-step RK4 over precomputed field
//! tables.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{PropagatorCache, Schedule};
use crate::error::{Error, Result};
use crate::hilbert::{partial_trace_spin, DensityMatrix, PureState};
use crate::model::{Boundary, LatticeModel};
use crate::rng::{stream_rng, StreamKind};
use crate::stats::tv_distance;
use crate::{tol, C64};

/// Continuum particle positions inside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    positions: Vec<f64>,
}

impl Configuration {
    pub fn new(positions: Vec<f64>, model: &LatticeModel) -> Result<Self> {
        if positions.len() != model.n_particles() {
            return Err(Error::DimensionMismatch {
                expected: model.n_particles(),
                got: positions.len(),
            });
        }
        if positions.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite position".into()));
        }
        Ok(Self {
            positions: positions.iter().map(|&x| model.confine(x)).collect(),
        })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
}

// ---------------------------------------------------------------------------
// Guidance field
// ---------------------------------------------------------------------------

/// Per-grid-point complex numerators (one per particle) and denominators of
/// the guidance ratio, plus the geometry needed to evaluate velocities at
/// continuum configurations.
#[derive(Debug, Clone)]
pub struct GuidanceField {
    grad: Vec<Vec<C64>>,
    diag: Vec<C64>,
    node_floor: f64,
    masses: Vec<f64>,
    sites: usize,
    spacing: f64,
    boundary: Boundary,
}

impl GuidanceField {
    /// Field of a density matrix (spin traced out first).
    pub fn from_density(w: &DensityMatrix, model: &LatticeModel) -> Result<Self> {
        let wsp = partial_trace_spin(w, model)?;
        let s = model.spatial_size();
        let n = model.n_particles();
        let m = wsp.entries();
        let two_dx = 2.0 * model.spacing();
        let mut grad = vec![vec![C64::new(0.0, 0.0); s]; n];
        let mut diag = vec![C64::new(0.0, 0.0); s];
        for g in 0..s {
            diag[g] = m[(g, g)];
            for (i, gi) in grad.iter_mut().enumerate() {
                let plus = shift_site(model, g, i, 1).map_or(C64::new(0.0, 0.0), |gp| m[(gp, g)]);
                let minus = shift_site(model, g, i, -1).map_or(C64::new(0.0, 0.0), |gm| m[(gm, g)]);
                gi[g] = (plus - minus) / C64::new(two_dx, 0.0);
            }
        }
        Self::assemble(grad, diag, model)
    }

    /// Field of a pure state; spin components are summed in both numerator
    /// and denominator, matching the traced density route exactly.
    pub fn from_pure(psi: &PureState, model: &LatticeModel) -> Result<Self> {
        if psi.dim() != model.basis_size() {
            return Err(Error::DimensionMismatch {
                expected: model.basis_size(),
                got: psi.dim(),
            });
        }
        let s = model.spatial_size();
        let k = model.spin_size();
        let n = model.n_particles();
        let two_dx = 2.0 * model.spacing();
        // Spin-summed sesquilinear slices: row(g', g) = sum_sigma psi(g',sigma) conj(psi(g,sigma)).
        let slice = |gp: usize, g: usize| -> C64 {
            let mut acc = C64::new(0.0, 0.0);
            for sigma in 0..k {
                acc += psi.amplitude(gp * k + sigma) * psi.amplitude(g * k + sigma).conj();
            }
            acc
        };
        let mut grad = vec![vec![C64::new(0.0, 0.0); s]; n];
        let mut diag = vec![C64::new(0.0, 0.0); s];
        for g in 0..s {
            diag[g] = slice(g, g);
            for (i, gi) in grad.iter_mut().enumerate() {
                let plus = shift_site(model, g, i, 1).map_or(C64::new(0.0, 0.0), |gp| slice(gp, g));
                let minus = shift_site(model, g, i, -1).map_or(C64::new(0.0, 0.0), |gm| slice(gm, g));
                gi[g] = (plus - minus) / C64::new(two_dx, 0.0);
            }
        }
        Self::assemble(grad, diag, model)
    }

    fn assemble(grad: Vec<Vec<C64>>, diag: Vec<C64>, model: &LatticeModel) -> Result<Self> {
        let max_diag = diag.iter().fold(0.0_f64, |a, z| a.max(z.norm()));
        Ok(Self {
            grad,
            diag,
            node_floor: tol::NODE_REL * max_diag,
            masses: model.masses().to_vec(),
            sites: model.sites(),
            spacing: model.spacing(),
            boundary: model.boundary(),
        })
    }

    fn confine(&self, x: f64) -> f64 {
        let len = self.sites as f64 * self.spacing;
        match self.boundary {
            Boundary::Periodic => x.rem_euclid(len),
            Boundary::HardWall => x.clamp(0.0, f64::from_bits(len.to_bits() - 1)),
        }
    }

    /// Velocities at a continuum configuration. Numerator and denominator
    /// are interpolated as complex fields before the ratio; below the node
    /// floor the velocity is 0. NaN anywhere is a hard fault.
    pub fn velocity_at(&self, positions: &[f64]) -> Result<Vec<f64>> {
        let n = self.masses.len();
        if positions.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: positions.len(),
            });
        }
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0f64; n];
        for i in 0..n {
            let u = self.confine(positions[i]) / self.spacing;
            let b = (u.floor() as usize).min(self.sites - 1);
            base[i] = b;
            frac[i] = (u - b as f64).clamp(0.0, 1.0);
        }
        let mut den = C64::new(0.0, 0.0);
        let mut num = vec![C64::new(0.0, 0.0); n];
        let corners = 1usize << n;
        'corner: for mask in 0..corners {
            let mut weight = 1.0;
            let mut sites = vec![0usize; n];
            for i in 0..n {
                if mask >> i & 1 == 1 {
                    weight *= frac[i];
                    let s = base[i] + 1;
                    sites[i] = match self.boundary {
                        Boundary::Periodic => s % self.sites,
                        Boundary::HardWall => {
                            if s >= self.sites {
                                // Beyond the wall the amplitude is 0.
                                continue 'corner;
                            }
                            s
                        }
                    };
                } else {
                    weight *= 1.0 - frac[i];
                    sites[i] = base[i];
                }
            }
            if weight == 0.0 {
                continue;
            }
            let g = crate::model::encode_sites(&sites, self.sites);
            den += self.diag[g] * weight;
            for (acc, gi) in num.iter_mut().zip(&self.grad) {
                *acc += gi[g] * weight;
            }
        }
        if den.norm() < self.node_floor || self.node_floor == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let mut v = Vec::with_capacity(n);
        for (i, (nu, mass)) in num.iter().zip(&self.masses).enumerate() {
            let vi = (nu / den).im / mass;
            if !vi.is_finite() {
                return Err(Error::Numerical(format!("velocity of particle {i} is not finite")));
            }
            v.push(vi);
        }
        Ok(v)
    }
}

fn shift_site(model: &LatticeModel, g: usize, particle: usize, dir: i64) -> Option<usize> {
    let mut sites = model.sites_of(g);
    let s = sites[particle] as i64 + dir;
    let l = model.sites() as i64;
    let new = match model.boundary() {
        Boundary::Periodic => s.rem_euclid(l),
        Boundary::HardWall => {
            if s < 0 || s >= l {
                return None;
            }
            s
        }
    };
    sites[particle] = new as usize;
    Some(model.index_of_sites(&sites))
}

/// Guidance velocity of a density matrix at one configuration.
pub fn w_velocity(w: &DensityMatrix, model: &LatticeModel, q: &Configuration) -> Result<Vec<f64>> {
    GuidanceField::from_density(w, model)?.velocity_at(q.positions())
}

/// Guidance velocity of a pure state at one configuration.
pub fn psi_velocity(psi: &PureState, model: &LatticeModel, q: &Configuration) -> Result<Vec<f64>> {
    GuidanceField::from_pure(psi, model)?.velocity_at(q.positions())
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Draw a configuration from a spatial probability law (indexed like the
/// spatial basis), uniformly jittered inside the chosen lattice cell. Draw
/// order per sample: one cell pick, then one jitter per particle.
pub fn sample_config_from_law(
    law: &[f64],
    model: &LatticeModel,
    rng: &mut impl rand::Rng,
) -> Result<Configuration> {
    if law.len() != model.spatial_size() {
        return Err(Error::DimensionMismatch {
            expected: model.spatial_size(),
            got: law.len(),
        });
    }
    let mut weights = Vec::with_capacity(law.len());
    for (g, &p) in law.iter().enumerate() {
        if p < -tol::ALGEBRAIC {
            return Err(Error::NegativeDiagonal { index: g, value: p });
        }
        weights.push(p.max(0.0));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numerical("position law sums to zero".into()));
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut cell = weights.len() - 1;
    for (g, &p) in weights.iter().enumerate() {
        acc += p;
        if u < acc {
            cell = g;
            break;
        }
    }
    let sites = model.sites_of(cell);
    let positions = sites
        .iter()
        .map(|&s| (s as f64 + rng.random::<f64>()) * model.spacing())
        .collect();
    Configuration::new(positions, model)
}

/// Draw a configuration from the position diagonal of W (spin traced out).
pub fn sample_initial_config(
    w: &DensityMatrix,
    model: &LatticeModel,
    rng: &mut impl rand::Rng,
) -> Result<Configuration> {
    let diag = partial_trace_spin(w, model)?.diagonal_real();
    sample_config_from_law(&diag, model, rng)
}

// ---------------------------------------------------------------------------
// Field tables and trajectory integration
// ---------------------------------------------------------------------------

/// Guidance fields precomputed on a schedule's half-step grid (for the RK4
/// stages) plus the exact spatial law at every full step. Built once and
/// shared by a whole trajectory ensemble.
pub struct WFieldTable<'m> {
    model: &'m LatticeModel,
    schedule: Schedule,
    fields: Vec<GuidanceField>,
    step_laws: Vec<Vec<f64>>,
}

impl<'m> WFieldTable<'m> {
    pub fn from_density(w0: &DensityMatrix, cache: &PropagatorCache<'m>) -> Result<Self> {
        Self::build(cache, |t, c| c.at(t)?.apply_density(w0))
    }

    pub fn from_pure(psi0: &PureState, cache: &PropagatorCache<'m>) -> Result<Self> {
        Self::build(cache, |t, c| c.at(t)?.apply_pure(psi0)?.projector())
    }

    fn build(
        cache: &PropagatorCache<'m>,
        state_at: impl Fn(f64, &PropagatorCache<'m>) -> Result<DensityMatrix>,
    ) -> Result<Self> {
        let model = cache.model();
        let schedule = *cache.schedule();
        schedule.validate()?;
        let mut fields = Vec::with_capacity(2 * schedule.steps + 1);
        let mut step_laws = Vec::with_capacity(schedule.steps + 1);
        for (k, t) in schedule.half_times().into_iter().enumerate() {
            let w_t = state_at(t, cache)?;
            if k % 2 == 0 {
                let diag = partial_trace_spin(&w_t, model)?.diagonal_real();
                let total: f64 = diag.iter().map(|&p| p.max(0.0)).sum();
                step_laws.push(diag.iter().map(|&p| p.max(0.0) / total).collect());
            }
            fields.push(GuidanceField::from_density(&w_t, model)?);
        }
        Ok(Self {
            model,
            schedule,
            fields,
            step_laws,
        })
    }

    pub fn model(&self) -> &'m LatticeModel {
        self.model
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Field at half-step index k (time t_start + k dt/2).
    pub fn field(&self, half_index: usize) -> &GuidanceField {
        &self.fields[half_index]
    }

    /// Exact spatial probability law diag W(t) at full step `step`.
    pub fn exact_law(&self, step: usize) -> &[f64] {
        &self.step_laws[step]
    }
}

/// One integrated trajectory: positions at every schedule grid time.
#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub stream_index: u64,
}

impl Trajectory {
    pub fn at_step(&self, k: usize) -> &[f64] {
        &self.positions[k]
    }
}

/// Fixed-step RK4 over the field table. Stage velocities are clamped
/// componentwise to dx/dt; exceeding ten times that cap is a hard fault.
pub fn integrate_trajectory(table: &WFieldTable, q0: &Configuration, stream_index: u64) -> Result<Trajectory> {
    let model = table.model();
    let schedule = table.schedule();
    let dt = schedule.dt();
    let cap = model.spacing() / dt;
    let hard_cap = tol::VELOCITY_CAP_FACTOR * cap;
    let n = model.n_particles();

    let clamp = |field: &GuidanceField, x: &[f64], t: f64| -> Result<Vec<f64>> {
        let mut v = field.velocity_at(x)?;
        for vi in &mut v {
            let speed = vi.abs();
            if speed > hard_cap {
                return Err(Error::StepTooLarge { speed, cap, t });
            }
            if speed > cap {
                *vi = vi.signum() * cap;
            }
        }
        Ok(v)
    };

    let mut x: Vec<f64> = q0.positions().iter().map(|&p| model.confine(p)).collect();
    let mut times = Vec::with_capacity(schedule.steps + 1);
    let mut positions = Vec::with_capacity(schedule.steps + 1);
    times.push(schedule.t_start);
    positions.push(x.clone());

    for k in 0..schedule.steps {
        let t = schedule.t_start + k as f64 * dt;
        let f0 = table.field(2 * k);
        let fm = table.field(2 * k + 1);
        let f1 = table.field(2 * k + 2);
        let v1 = clamp(f0, &x, t)?;
        let x2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * v1[i]).collect();
        let v2 = clamp(fm, &x2, t)?;
        let x3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * dt * v2[i]).collect();
        let v3 = clamp(fm, &x3, t)?;
        let x4: Vec<f64> = (0..n).map(|i| x[i] + dt * v3[i]).collect();
        let v4 = clamp(f1, &x4, t)?;
        for i in 0..n {
            x[i] = model.confine(x[i] + dt / 6.0 * (v1[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]));
        }
        times.push(schedule.t_start + (k + 1) as f64 * dt);
        positions.push(x.clone());
    }
    Ok(Trajectory {
        times,
        positions,
        stream_index,
    })
}

/// Integrate an ensemble of `m` trajectories with initial configurations
/// sampled from diag W(0), one RNG stream per trajectory. Deterministic for
/// a fixed master seed regardless of thread count.
pub fn run_trajectory_ensemble(
    table: &WFieldTable,
    w0: &DensityMatrix,
    m: usize,
    master_seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(master_seed, StreamKind::Trajectory, i as u64);
            let q0 = sample_initial_config(w0, table.model(), &mut rng)?;
            integrate_trajectory(table, &q0, i as u64)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Equivariance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EquivarianceRow {
    pub t: f64,
    pub tv_distance: f64,
    pub samples: usize,
}

/// Per-checkpoint total variation between the empirical cell histogram of
/// the trajectory ensemble and the exact law diag W(t).
#[derive(Debug, Clone, Serialize)]
pub struct EquivarianceReport {
    pub checkpoints: Vec<EquivarianceRow>,
    pub threshold: f64,
    pub pass: bool,
}

/// Cell index of a configuration (floor of each coordinate in units of dx).
pub fn configuration_cell(model: &LatticeModel, positions: &[f64]) -> usize {
    let sites: Vec<usize> = positions
        .iter()
        .map(|&x| ((model.confine(x) / model.spacing()).floor() as usize).min(model.sites() - 1))
        .collect();
    model.index_of_sites(&sites)
}

/// Compare ensemble histograms against the exact law at each checkpoint.
/// Checkpoints must lie on the schedule grid.
pub fn equivariance_report(
    table: &WFieldTable,
    trajectories: &[Trajectory],
    checkpoints: &[f64],
    threshold: f64,
) -> Result<EquivarianceReport> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let model = table.model();
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        let step = table.schedule().grid_index(t).ok_or_else(|| {
            Error::InvalidArgument(format!("checkpoint {t} is not on the schedule grid"))
        })?;
        let mut counts = vec![0.0f64; model.spatial_size()];
        for traj in trajectories {
            counts[configuration_cell(model, traj.at_step(step))] += 1.0;
        }
        let m = trajectories.len();
        for c in &mut counts {
            *c /= m as f64;
        }
        let tv = tv_distance(&counts, table.exact_law(step))?;
        rows.push(EquivarianceRow {
            t,
            tv_distance: tv,
            samples: m,
        });
    }
    let pass = rows.iter().all(|r| r.tv_distance <= threshold);
    Ok(EquivarianceReport {
        checkpoints: rows,
        threshold,
        pass,
    })
}

/// Full equivariance experiment: sample, integrate, compare at checkpoints.
/// Requires at least 100 trajectories.
pub fn equivariance_test(
    model: &LatticeModel,
    w0: &DensityMatrix,
    schedule: &Schedule,
    checkpoints: &[f64],
    m: usize,
    master_seed: u64,
    threshold: f64,
) -> Result<EquivarianceReport> {
    if m < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 trajectories, got {m}")));
    }
    schedule.validate()?;
    let cache = PropagatorCache::new(model, schedule);
    let table = WFieldTable::from_density(w0, &cache)?;
    let trajectories = run_trajectory_ensemble(&table, w0, m, master_seed)?;
    equivariance_report(&table, &trajectories, checkpoints, threshold)
}

// ---------------------------------------------------------------------------
// Conditional states
// ---------------------------------------------------------------------------

fn split_particles(model: &LatticeModel, subsystem: &[usize]) -> Result<Vec<usize>> {
    let n = model.n_particles();
    if subsystem.is_empty() {
        return Err(Error::InvalidArgument("empty subsystem".into()));
    }
    if subsystem.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(
            "subsystem particle indices must be strictly increasing".into(),
        ));
    }
    if *subsystem.last().unwrap() >= n {
        return Err(Error::IndexOutOfRange {
            index: *subsystem.last().unwrap(),
            len: n,
        });
    }
    let env: Vec<usize> = (0..n).filter(|i| !subsystem.contains(i)).collect();
    if env.is_empty() {
        return Err(Error::InvalidArgument("environment is empty; nothing to condition on".into()));
    }
    Ok(env)
}

fn env_sites(model: &LatticeModel, env: &[usize], config: &Configuration) -> Vec<usize> {
    let l = model.sites() as i64;
    env.iter()
        .map(|&j| {
            let s = (config.positions()[j] / model.spacing()).round() as i64;
            match model.boundary() {
                Boundary::Periodic => s.rem_euclid(l) as usize,
                Boundary::HardWall => s.clamp(0, l - 1) as usize,
            }
        })
        .collect()
}

fn compose_sites(n: usize, subsystem: &[usize], sub_sites: &[usize], env: &[usize], env_fixed: &[usize]) -> Vec<usize> {
    let mut full = vec![0usize; n];
    for (k, &i) in subsystem.iter().enumerate() {
        full[i] = sub_sites[k];
    }
    for (k, &j) in env.iter().enumerate() {
        full[j] = env_fixed[k];
    }
    full
}

/// Conditional wavefunction of a subsystem: the slice of a spinless pure
/// state at the environment's configuration (snapped to the nearest grid
/// cell), normalized, with the phase fixed so the largest-modulus amplitude
/// is real positive.
pub fn conditional_wavefunction(
    psi: &PureState,
    model: &LatticeModel,
    subsystem: &[usize],
    config: &Configuration,
) -> Result<PureState> {
    if model.spin_k() != 1 {
        return Err(Error::InvalidArgument(
            "conditional wavefunctions are defined for spinless models; use the conditional density matrix".into(),
        ));
    }
    if psi.dim() != model.basis_size() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_size(),
            got: psi.dim(),
        });
    }
    let env = split_particles(model, subsystem)?;
    let fixed = env_sites(model, &env, config);
    let n = model.n_particles();
    let l = model.sites();
    let sub_dim = l.pow(subsystem.len() as u32);
    let mut amps = DVector::from_element(sub_dim, C64::new(0.0, 0.0));
    for h in 0..sub_dim {
        let sub = crate::model::decode_sites(h, subsystem.len(), l);
        let full = compose_sites(n, subsystem, &sub, &env, &fixed);
        amps[h] = psi.amplitude(model.index_of_sites(&full));
    }
    let norm = amps.norm();
    if norm < tol::ZERO_SLICE {
        return Err(Error::ZeroSlice(norm));
    }
    amps /= C64::new(norm, 0.0);
    // Phase convention: rotate the largest-modulus amplitude (lowest index on
    // ties) onto the positive real axis.
    let mut best = 0;
    for i in 1..sub_dim {
        if amps[i].norm() > amps[best].norm() {
            best = i;
        }
    }
    let phase = amps[best] / C64::new(amps[best].norm(), 0.0);
    amps /= phase;
    PureState::new(amps)
}

/// Conditional density matrix of a subsystem of a pure state: environment
/// positions are conditioned on (snapped to the grid), environment spins are
/// traced out. Defined for any spin dimension.
pub fn conditional_density(
    psi: &PureState,
    model: &LatticeModel,
    subsystem: &[usize],
    config: &Configuration,
) -> Result<DensityMatrix> {
    if psi.dim() != model.basis_size() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_size(),
            got: psi.dim(),
        });
    }
    let env = split_particles(model, subsystem)?;
    let fixed = env_sites(model, &env, config);
    let n = model.n_particles();
    let l = model.sites();
    let k = model.spin_k();
    let n_sub = subsystem.len();
    let sub_space = l.pow(n_sub as u32);
    let sub_spin = k.pow(n_sub as u32);
    let env_spin = k.pow(env.len() as u32);
    let sub_dim = sub_space * sub_spin;

    // Amplitude of (sub index, env spin) pairs.
    let amp = |row: usize, s2: usize| -> C64 {
        let h = row / sub_spin;
        let s1 = row % sub_spin;
        let sub = crate::model::decode_sites(h, n_sub, l);
        let full_sites = compose_sites(n, subsystem, &sub, &env, &fixed);
        let sub_spins = crate::model::decode_sites(s1, n_sub, k);
        let env_spins = crate::model::decode_sites(s2, env.len(), k);
        let full_spins = compose_sites(n, subsystem, &sub_spins, &env, &env_spins);
        psi.amplitude(model.flat_index(model.index_of_sites(&full_sites), model.index_of_spins(&full_spins)))
    };

    let mut m = nalgebra::DMatrix::<C64>::zeros(sub_dim, sub_dim);
    for row in 0..sub_dim {
        for col in 0..sub_dim {
            let mut acc = C64::new(0.0, 0.0);
            for s2 in 0..env_spin {
                acc += amp(row, s2) * amp(col, s2).conj();
            }
            m[(row, col)] = acc;
        }
    }
    let trace: f64 = (0..sub_dim).map(|i| m[(i, i)].re).sum();
    if trace.sqrt() < tol::ZERO_SLICE {
        return Err(Error::ZeroSlice(trace.sqrt()));
    }
    DensityMatrix::new(m / C64::new(trace, 0.0))
}

// ---------------------------------------------------------------------------
// Continuity diagnostic
// ---------------------------------------------------------------------------

/// Residual of the lattice continuity equation at time t: the time
/// derivative of the position diagonal (central difference of width h)
/// against the bond-current inflow 2 sum_q' Im[H(q,q') W(q',q)], which is
/// d_t W(q,q) exactly under dW/dt = -i[H, W]. O(h^2) for the exact
/// evolution; independent of the guidance discretization.
pub fn continuity_residual(w0: &DensityMatrix, model: &LatticeModel, t: f64, h: f64) -> Result<f64> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let w_plus = crate::dynamics::evolve_density(w0, model, t + h)?;
    let w_minus = crate::dynamics::evolve_density(w0, model, t - h)?;
    let w_t = crate::dynamics::evolve_density(w0, model, t)?;
    let hm = model.hamiltonian().entries();
    let wm = w_t.entries();
    let dim = model.basis_size();
    let mut residual: f64 = 0.0;
    for q in 0..dim {
        let dp = (w_plus.entry(q, q).re - w_minus.entry(q, q).re) / (2.0 * h);
        let mut inflow = 0.0;
        for qp in 0..dim {
            inflow += (hm[(q, qp)] * wm[(qp, q)]).im;
        }
        residual = residual.max((dp - 2.0 * inflow).abs());
    }
    Ok(residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hilbert::make_density;
    use crate::model::{build_lattice_model, Boundary, ModelSpec, ParticleSpec, PotentialSpec};
    use nalgebra::DVector;

    fn model(sites: usize, boundary: Boundary, masses: &[f64], spin: usize) -> LatticeModel {
        build_lattice_model(&ModelSpec {
            particles: masses.iter().map(|&m| ParticleSpec { mass: m }).collect(),
            sites,
            spacing: 1.0,
            boundary,
            spin,
            potential: PotentialSpec::default(),
            dimension_cap: 4096,
        })
        .unwrap()
    }

    fn ring8() -> LatticeModel {
        model(8, Boundary::Periodic, &[1.0], 1)
    }

    fn plane_wave(l: usize, mode: i32) -> PureState {
        let k = 2.0 * std::f64::consts::PI * mode as f64 / l as f64;
        PureState::normalized(DVector::from_fn(l, |q, _| C64::from_polar(1.0, k * q as f64))).unwrap()
    }

    fn localized(dim: usize, at: usize) -> PureState {
        PureState::new(DVector::from_fn(dim, |i, _| {
            if i == at {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }))
        .unwrap()
    }

    #[test]
    fn real_states_do_not_move() {
        let m = ring8();
        let w = DensityMatrix::maximally_mixed(8).unwrap();
        for g in 0..8 {
            let q = Configuration::new(vec![g as f64], &m).unwrap();
            assert_eq!(w_velocity(&w, &m, &q).unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn plane_wave_velocity_matches_the_lattice_dispersion() {
        // v = sin(k dx)/dx for a plane wave (central-difference dispersion).
        let m = ring8();
        let psi = plane_wave(8, 1);
        let want = (2.0 * std::f64::consts::PI / 8.0).sin();
        for g in 0..8 {
            let q = Configuration::new(vec![g as f64], &m).unwrap();
            let v = psi_velocity(&psi, &m, &q).unwrap();
            assert!((v[0] - want).abs() < 1e-12, "{} vs {want}", v[0]);
        }
        // The field is uniform, so interpolation preserves the value off-grid.
        let q = Configuration::new(vec![2.37], &m).unwrap();
        let v = psi_velocity(&psi, &m, &q).unwrap();
        assert!((v[0] - want).abs() < 1e-12);
        // Heavier particles move slower by 1/m.
        let m2 = model(8, Boundary::Periodic, &[4.0], 1);
        let v2 = psi_velocity(&plane_wave(8, 1), &m2, &Configuration::new(vec![0.0], &m2).unwrap()).unwrap();
        assert!((v2[0] - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_velocity_is_the_density_weighted_ratio() {
        // Equal mixture of modes 1 and 0: v = sin(k)/2 everywhere.
        let m = ring8();
        let w = make_density(&[0.5, 0.5], &[plane_wave(8, 1), plane_wave(8, 0)]).unwrap();
        let want = 0.5 * (2.0 * std::f64::consts::PI / 8.0).sin();
        for x in [0.0, 1.0, 3.7, 6.2] {
            let q = Configuration::new(vec![x], &m).unwrap();
            let v = w_velocity(&w, &m, &q).unwrap();
            assert!((v[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_density_and_wavefunction_guidance_agree_at_grid_points() {
        let m = ring8();
        let mut rng = stream_rng(31, StreamKind::StatePick, 0);
        for _ in 0..20 {
            let psi = random_state(8, &mut rng);
            let w = psi.projector().unwrap();
            for g in 0..8 {
                let q = Configuration::new(vec![g as f64], &m).unwrap();
                let vw = w_velocity(&w, &m, &q).unwrap();
                let vp = psi_velocity(&psi, &m, &q).unwrap();
                assert!((vw[0] - vp[0]).abs() < 1e-10, "site {g}: {} vs {}", vw[0], vp[0]);
            }
        }
    }

    #[test]
    fn spin_guidance_traces_the_spin_factor() {
        // Pure state on a spin-2 model: traced-W route equals the spin-summed
        // wavefunction route at grid points.
        let m = model(4, Boundary::Periodic, &[1.0], 2);
        let mut rng = stream_rng(32, StreamKind::StatePick, 0);
        let psi = random_state(8, &mut rng);
        let w = psi.projector().unwrap();
        for g in 0..4 {
            let q = Configuration::new(vec![g as f64], &m).unwrap();
            let vw = w_velocity(&w, &m, &q).unwrap();
            let vp = psi_velocity(&psi, &m, &q).unwrap();
            assert!((vw[0] - vp[0]).abs() < 1e-10);
        }
    }

    #[test]
    fn global_phase_leaves_velocities_unchanged() {
        let m = ring8();
        let mut rng = stream_rng(33, StreamKind::StatePick, 0);
        let psi = random_state(8, &mut rng);
        let rotated = PureState::new(psi.amplitudes() * C64::from_polar(1.0, 1.234)).unwrap();
        for x in [0.0, 2.5, 5.1] {
            let q = Configuration::new(vec![x], &m).unwrap();
            let a = psi_velocity(&psi, &m, &q).unwrap();
            let b = psi_velocity(&rotated, &m, &q).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn velocities_vanish_at_nodes() {
        let m = ring8();
        let psi = PureState::normalized(DVector::from_fn(8, |q, _| match q {
            0 => C64::new(1.0, 0.0),
            1 => C64::new(0.0, 1.0),
            _ => C64::new(0.0, 0.0),
        }))
        .unwrap();
        let w = psi.projector().unwrap();
        // Far from the support the interpolated denominator is 0.
        let q = Configuration::new(vec![4.2], &m).unwrap();
        assert_eq!(w_velocity(&w, &m, &q).unwrap(), vec![0.0]);
        // On the support the velocity is finite.
        let q0 = Configuration::new(vec![0.5], &m).unwrap();
        assert!(w_velocity(&w, &m, &q0).unwrap()[0].is_finite());
    }

    fn random_state(dim: usize, rng: &mut impl rand::Rng) -> PureState {
        use rand_distr::{Distribution, StandardNormal};
        let v = DVector::from_fn(dim, |_, _| {
            C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng))
        });
        PureState::normalized(v).unwrap()
    }

    #[test]
    fn sampling_respects_the_diagonal() {
        let m = ring8();
        // Point mass: all samples inside cell 3.
        let w = localized(8, 3).projector().unwrap();
        let mut rng = stream_rng(7, StreamKind::InitialSample, 0);
        for _ in 0..200 {
            let q = sample_initial_config(&w, &m, &mut rng).unwrap();
            assert!(q.positions()[0] >= 3.0 && q.positions()[0] < 4.0);
        }
        // Uniform diagonal: chi-square over cells at significance 0.01.
        let uniform = DensityMatrix::maximally_mixed(8).unwrap();
        let mut counts = [0u64; 8];
        for _ in 0..20_000 {
            let q = sample_initial_config(&uniform, &m, &mut rng).unwrap();
            counts[configuration_cell(&m, q.positions())] += 1;
        }
        let r = crate::stats::chi_square_gof(&counts, &[1.0 / 8.0; 8], 0.01).unwrap();
        assert!(r.pass, "chi-square {}", r.statistic);
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let m = ring8();
        let w = DensityMatrix::maximally_mixed(8).unwrap();
        let mut a = stream_rng(42, StreamKind::Trajectory, 9);
        let mut b = stream_rng(42, StreamKind::Trajectory, 9);
        let qa = sample_initial_config(&w, &m, &mut a).unwrap();
        let qb = sample_initial_config(&w, &m, &mut b).unwrap();
        assert_eq!(qa.positions(), qb.positions());
    }

    fn table_for<'m>(
        model: &'m LatticeModel,
        w0: &DensityMatrix,
        schedule: &Schedule,
    ) -> WFieldTable<'m> {
        let cache = PropagatorCache::new(model, schedule);
        WFieldTable::from_density(w0, &cache).unwrap()
    }

    #[test]
    fn uniform_field_integrates_to_exact_drift() {
        let m = ring8();
        let w = plane_wave(8, 1).projector().unwrap();
        let schedule = Schedule {
            t_start: 0.0,
            t_end: 4.0,
            steps: 8,
        };
        let table = table_for(&m, &w, &schedule);
        let q0 = Configuration::new(vec![1.25], &m).unwrap();
        let traj = integrate_trajectory(&table, &q0, 0).unwrap();
        let want = (1.25 + 4.0 * (2.0 * std::f64::consts::PI / 8.0).sin()).rem_euclid(8.0);
        let got = traj.at_step(8)[0];
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert_eq!(traj.times.len(), 9);
    }

    #[test]
    fn stage_velocities_are_capped_and_overspeed_is_fatal() {
        let m = ring8();
        let w = plane_wave(8, 1).projector().unwrap();
        // dt = 2: cap = 0.5 < v = 0.707, so motion advances at the cap.
        let capped = Schedule {
            t_start: 0.0,
            t_end: 2.0,
            steps: 1,
        };
        let table = table_for(&m, &w, &capped);
        let q0 = Configuration::new(vec![0.0], &m).unwrap();
        let traj = integrate_trajectory(&table, &q0, 0).unwrap();
        assert!((traj.at_step(1)[0] - 1.0).abs() < 1e-12);
        // dt = 100: 10x cap = 0.1 < v, hard fault.
        let fatal = Schedule {
            t_start: 0.0,
            t_end: 100.0,
            steps: 1,
        };
        let table = table_for(&m, &w, &fatal);
        assert!(matches!(
            integrate_trajectory(&table, &q0, 0),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn frozen_state_keeps_the_initial_histogram() {
        // Real W: velocities vanish, so the t > 0 histograms equal the t = 0
        // one and the TV against the constant exact law never moves.
        let m = ring8();
        let w = DensityMatrix::maximally_mixed(8).unwrap();
        let schedule = Schedule {
            t_start: 0.0,
            t_end: 1.0,
            steps: 4,
        };
        let report = equivariance_test(&m, &w, &schedule, &[0.0, 0.5, 1.0], 400, 5, 0.12).unwrap();
        assert!(report.pass);
        let tv0 = report.checkpoints[0].tv_distance;
        for row in &report.checkpoints {
            assert!((row.tv_distance - tv0).abs() < 1e-12);
            assert_eq!(row.samples, 400);
        }
    }

    #[test]
    fn equivariance_validates_inputs() {
        let m = ring8();
        let w = DensityMatrix::maximally_mixed(8).unwrap();
        let schedule = Schedule {
            t_start: 0.0,
            t_end: 1.0,
            steps: 4,
        };
        assert!(matches!(
            equivariance_test(&m, &w, &schedule, &[0.0], 50, 5, 0.1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            equivariance_test(&m, &w, &schedule, &[0.3], 200, 5, 0.1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn ensembles_are_deterministic() {
        let m = ring8();
        let w = make_density(&[0.5, 0.5], &[plane_wave(8, 1), plane_wave(8, 0)]).unwrap();
        let schedule = Schedule {
            t_start: 0.0,
            t_end: 1.0,
            steps: 4,
        };
        let table = table_for(&m, &w, &schedule);
        let a = run_trajectory_ensemble(&table, &w, 64, 17).unwrap();
        let b = run_trajectory_ensemble(&table, &w, 64, 17).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.positions, y.positions);
        }
        let c = run_trajectory_ensemble(&table, &w, 64, 18).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.positions != y.positions));
    }

    #[test]
    fn conditional_wavefunction_of_a_product_state_is_the_factor() {
        let m = model(4, Boundary::HardWall, &[1.0, 1.0], 1);
        let phi: Vec<C64> = vec![
            C64::new(0.5, 0.1),
            C64::new(-0.3, 0.4),
            C64::new(0.2, -0.6),
            C64::new(0.1, 0.2),
        ];
        let chi: Vec<C64> = vec![
            C64::new(0.7, 0.0),
            C64::new(0.0, 0.5),
            C64::new(-0.2, 0.3),
            C64::new(0.4, -0.1),
        ];
        let mut amps = DVector::from_element(16, C64::new(0.0, 0.0));
        for a in 0..4 {
            for b in 0..4 {
                amps[a * 4 + b] = phi[a] * chi[b];
            }
        }
        let psi = PureState::normalized(amps).unwrap();
        let env = Configuration::new(vec![0.0, 2.1], &m).unwrap();
        let cond = conditional_wavefunction(&psi, &m, &[0], &env).unwrap();
        // Compare against the normalized factor up to the phase convention.
        let phi_state = PureState::normalized(DVector::from_vec(phi)).unwrap();
        let overlap = cond.inner(&phi_state).norm();
        assert!((overlap - 1.0).abs() < 1e-12, "overlap {overlap}");
    }

    #[test]
    fn conditional_wavefunction_of_an_entangled_state_collapses_the_branch() {
        let m = model(2, Boundary::HardWall, &[1.0, 1.0], 1);
        // (|0,0> + |1,1>)/sqrt(2).
        let mut amps = DVector::from_element(4, C64::new(0.0, 0.0));
        amps[0] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        amps[3] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let psi = PureState::new(amps).unwrap();
        let env = Configuration::new(vec![0.0, 0.9], &m).unwrap();
        let cond = conditional_wavefunction(&psi, &m, &[0], &env).unwrap();
        assert!((cond.amplitude(1) - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!(cond.amplitude(0).norm() < 1e-12);
    }

    #[test]
    fn conditional_slice_of_zero_weight_is_rejected() {
        let m = model(4, Boundary::HardWall, &[1.0, 1.0], 1);
        // Support only on env site 1.
        let mut amps = DVector::from_element(16, C64::new(0.0, 0.0));
        amps[m.index_of_sites(&[0, 1])] = C64::new(1.0, 0.0);
        let psi = PureState::new(amps).unwrap();
        let env = Configuration::new(vec![0.0, 3.0], &m).unwrap();
        assert!(matches!(
            conditional_wavefunction(&psi, &m, &[0], &env),
            Err(Error::ZeroSlice(_))
        ));
    }

    #[test]
    fn conditional_density_matches_the_wavefunction_route_when_spinless() {
        let m = model(4, Boundary::HardWall, &[1.0, 1.0], 1);
        let mut rng = stream_rng(55, StreamKind::StatePick, 1);
        let psi = random_state(16, &mut rng);
        let env = Configuration::new(vec![0.0, 1.2], &m).unwrap();
        let cond_psi = conditional_wavefunction(&psi, &m, &[0], &env).unwrap();
        let cond_w = conditional_density(&psi, &m, &[0], &env).unwrap();
        let proj = cond_psi.projector().unwrap();
        assert!(crate::hilbert::max_abs(&(cond_w.entries() - proj.entries())) < 1e-12);
        assert!((cond_w.purity() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spin_entangled_environment_leaves_a_mixed_conditional_state() {
        let m = model(2, Boundary::HardWall, &[1.0, 1.0], 2);
        // Positions fixed at (0, 1); spins maximally entangled.
        let mut amps = DVector::from_element(16, C64::new(0.0, 0.0));
        let g = m.index_of_sites(&[0, 1]);
        let up_up = m.flat_index(g, m.index_of_spins(&[0, 0]));
        let dn_dn = m.flat_index(g, m.index_of_spins(&[1, 1]));
        amps[up_up] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        amps[dn_dn] = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let psi = PureState::new(amps).unwrap();
        let env = Configuration::new(vec![0.0, 1.0], &m).unwrap();
        let cond = conditional_density(&psi, &m, &[0], &env).unwrap();
        assert_eq!(cond.dim(), 4);
        assert!((cond.purity() - 0.5).abs() < 1e-12);
        // Position is sharp at site 0; spin is an equal mixture.
        assert!((cond.entry(0, 0).re - 0.5).abs() < 1e-12);
        assert!((cond.entry(1, 1).re - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conditional_guidance_matches_the_full_configuration_velocity() {
        // With the environment exactly on the grid, the subsystem velocity
        // from the conditional state equals the full-state velocity.
        let m = model(4, Boundary::HardWall, &[1.0, 1.3], 1);
        let sub_model = model(4, Boundary::HardWall, &[1.0], 1);
        let mut rng = stream_rng(56, StreamKind::StatePick, 2);
        for trial in 0..25 {
            let psi = random_state(16, &mut rng);
            let env = Configuration::new(vec![1.0, 2.0], &m).unwrap();
            let full_v = psi_velocity(&psi, &m, &env).unwrap();
            let cond = conditional_wavefunction(&psi, &m, &[0], &env).unwrap();
            let sub_q = Configuration::new(vec![1.0], &sub_model).unwrap();
            let cond_v = psi_velocity(&cond, &sub_model, &sub_q).unwrap();
            assert!(
                (full_v[0] - cond_v[0]).abs() < 1e-9,
                "trial {trial}: {} vs {}",
                full_v[0],
                cond_v[0]
            );
        }
    }

    #[test]
    fn conditional_density_guidance_matches_on_spin_models() {
        let m = model(3, Boundary::HardWall, &[1.0, 2.0], 2);
        let sub_model = model(3, Boundary::HardWall, &[1.0], 2);
        let mut rng = stream_rng(57, StreamKind::StatePick, 3);
        for _ in 0..10 {
            let psi = random_state(m.basis_size(), &mut rng);
            let env = Configuration::new(vec![1.0, 2.0], &m).unwrap();
            let full_v = psi_velocity(&psi, &m, &env).unwrap();
            let cond = conditional_density(&psi, &m, &[0], &env).unwrap();
            let sub_q = Configuration::new(vec![1.0], &sub_model).unwrap();
            let cond_v = w_velocity(&cond, &sub_model, &sub_q).unwrap();
            assert!((full_v[0] - cond_v[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn subsystem_validation() {
        let m = model(4, Boundary::HardWall, &[1.0, 1.0], 1);
        let psi = localized(16, 5);
        let env = Configuration::new(vec![0.0, 1.0], &m).unwrap();
        assert!(matches!(
            conditional_wavefunction(&psi, &m, &[], &env),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            conditional_wavefunction(&psi, &m, &[0, 1], &env),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            conditional_wavefunction(&psi, &m, &[2], &env),
            Err(Error::IndexOutOfRange { .. })
        ));
        let spin_model = model(2, Boundary::HardWall, &[1.0, 1.0], 2);
        let psi2 = localized(16, 0);
        assert!(matches!(
            conditional_wavefunction(&psi2, &spin_model, &[0], &env),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn continuity_residual_is_small_for_the_exact_evolution() {
        let m = ring8();
        let w = make_density(&[0.7, 0.3], &[localized(8, 2), plane_wave(8, 3)]).unwrap();
        let r = continuity_residual(&w, &m, 1.0, 1e-3).unwrap();
        assert!(r < 1e-4, "residual {r}");
        // Stationary mixture: residual at the rounding floor.
        let stationary = make_density(&[0.5, 0.5], &[plane_wave(8, 1), plane_wave(8, 0)]).unwrap();
        let r0 = continuity_residual(&stationary, &m, 2.0, 1e-3).unwrap();
        assert!(r0 < 1e-9, "residual {r0}");
    }
}
