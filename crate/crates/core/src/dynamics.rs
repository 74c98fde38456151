//! Exact unitary dynamics through the spectral decomposition of the model
//! Hamiltonian: U(t) = Q exp(-i Lambda t) Q†, applied to density matrices
//! (W -> U W U†) and pure states (psi -> U psi). No time-stepping error;
//! states are revalidated after every application.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hilbert::{expectation, DensityMatrix, EigenSystem, Operator, PureState};
use crate::model::{LatticeModel, MacroDecomposition};
use crate::{tol, C64};

/// Uniform time grid [t_start, t_end] with `steps` equal steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let finite = self.t_start.is_finite() && self.t_end.is_finite();
        if !finite || self.t_end <= self.t_start || self.steps == 0 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs t_end > t_start and steps >= 1, got [{}, {}] / {}",
                self.t_start, self.t_end, self.steps
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    /// Grid times t_start + k dt, k = 0..=steps.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t_start + k as f64 * self.dt()).collect()
    }

    /// Half-step grid t_start + k dt/2, k = 0..=2*steps.
    pub fn half_times(&self) -> Vec<f64> {
        let h = self.dt() / 2.0;
        (0..=2 * self.steps).map(|k| self.t_start + k as f64 * h).collect()
    }

    /// Index of `t` on the grid, if it sits on it within [`tol::GRID_SNAP`].
    pub fn grid_index(&self, t: f64) -> Option<usize> {
        let k = ((t - self.t_start) / self.dt()).round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        ((self.t_start + k as f64 * self.dt()) - t).abs().le(&tol::GRID_SNAP).then_some(k)
    }
}

/// Unitary evolution operator for a fixed time. Unitarity is validated
/// within [`tol::COMPLETENESS`] at construction.
#[derive(Debug, Clone)]
pub struct Propagator {
    time: f64,
    op: Operator,
}

impl Propagator {
    pub fn from_eigen(eigen: &EigenSystem, t: f64) -> Result<Self> {
        let n = eigen.dim();
        let q = eigen.eigenvectors();
        // U = Q D Q† with D = diag(exp(-i lambda t)): scale columns, then
        // multiply by Q† once.
        let mut qd = q.clone();
        for (k, &l) in eigen.eigenvalues().iter().enumerate() {
            let phase = C64::from_polar(1.0, -l * t);
            for i in 0..n {
                qd[(i, k)] *= phase;
            }
        }
        let u = qd * q.adjoint();
        let op = Operator::new(u)?;
        let dev = op.unitarity_deviation();
        if dev > tol::COMPLETENESS {
            return Err(Error::Numerical(format!(
                "propagator at t = {t} deviates from unitarity by {dev:e}"
            )));
        }
        Ok(Self { time: t, op })
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    /// U W U†.
    pub fn apply_density(&self, w: &DensityMatrix) -> Result<DensityMatrix> {
        if w.dim() != self.op.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.op.dim(),
                got: w.dim(),
            });
        }
        let u = self.op.entries();
        DensityMatrix::new(u * w.entries() * u.adjoint())
    }

    /// U psi.
    pub fn apply_pure(&self, psi: &PureState) -> Result<PureState> {
        if psi.dim() != self.op.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.op.dim(),
                got: psi.dim(),
            });
        }
        PureState::new(self.op.entries() * psi.amplitudes())
    }
}

/// U(t) for the model Hamiltonian.
pub fn propagator(model: &LatticeModel, t: f64) -> Result<Propagator> {
    Propagator::from_eigen(model.eigen(), t)
}

/// W(t) = U(t) W U(t)†.
pub fn evolve_density(w: &DensityMatrix, model: &LatticeModel, t: f64) -> Result<DensityMatrix> {
    propagator(model, t)?.apply_density(w)
}

/// psi(t) = U(t) psi.
pub fn evolve_pure(psi: &PureState, model: &LatticeModel, t: f64) -> Result<PureState> {
    propagator(model, t)?.apply_pure(psi)
}

/// Propagator cache keyed by position on a schedule's half-step grid.
/// Off-grid times are computed fresh and not stored. Thread-safe; concurrent
/// misses may compute the same propagator twice but insert identical values,
/// so results do not depend on scheduling.
pub struct PropagatorCache<'m> {
    model: &'m LatticeModel,
    schedule: Schedule,
    map: Mutex<HashMap<i64, Arc<Propagator>>>,
}

impl<'m> PropagatorCache<'m> {
    pub fn new(model: &'m LatticeModel, schedule: &Schedule) -> Self {
        Self {
            model,
            schedule: *schedule,
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn model(&self) -> &'m LatticeModel {
        self.model
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn at(&self, t: f64) -> Result<Arc<Propagator>> {
        let half_dt = self.schedule.dt() / 2.0;
        let k = ((t - self.schedule.t_start) / half_dt).round();
        let on_grid = k.is_finite() && ((self.schedule.t_start + k * half_dt) - t).abs() <= tol::GRID_SNAP;
        if !on_grid {
            return Ok(Arc::new(propagator(self.model, t)?));
        }
        let key = k as i64;
        if let Some(hit) = self.map.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let fresh = Arc::new(propagator(self.model, t)?);
        let mut map = self.map.lock().unwrap();
        Ok(map.entry(key).or_insert(fresh).clone())
    }
}

/// Occupations p_nu = tr(P_nu W) of the macro cells. Nonnegative within
/// tolerance (tiny negatives are clipped) and sum to 1 within
/// [`tol::COMPLETENESS`].
pub fn branch_weights(w: &DensityMatrix, decomposition: &MacroDecomposition) -> Result<Vec<f64>> {
    if w.dim() != decomposition.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: decomposition.ambient_dim(),
            got: w.dim(),
        });
    }
    let mut weights = Vec::with_capacity(decomposition.len());
    for cell in decomposition.cells() {
        let p = expectation(cell.subspace.projector(), w)?;
        if p.re < -tol::ALGEBRAIC || p.im.abs() > tol::ALGEBRAIC {
            return Err(Error::Numerical(format!(
                "branch weight for cell '{}' is {p}, expected a nonnegative real",
                cell.label
            )));
        }
        weights.push(p.re.max(0.0));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > tol::COMPLETENESS {
        return Err(Error::Numerical(format!("branch weights sum to {total}, expected 1")));
    }
    Ok(weights)
}

/// Mass-weighted position density over lattice sites at a snapshot time:
/// m(x_s) = sum_i m_i P(particle i at site s). Sums to the total mass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MassDensityField {
    pub time: f64,
    pub values: Vec<f64>,
}

pub fn mass_density(w: &DensityMatrix, model: &LatticeModel, time: f64) -> Result<MassDensityField> {
    if w.dim() != model.basis_size() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_size(),
            got: w.dim(),
        });
    }
    let k = model.spin_size();
    let n = model.n_particles();
    let mut values = vec![0.0; model.sites()];
    for g in 0..model.spatial_size() {
        let mut p = 0.0;
        for sigma in 0..k {
            p += w.entry(model.flat_index(g, sigma), model.flat_index(g, sigma)).re;
        }
        let sites = model.sites_of(g);
        for i in 0..n {
            values[sites[i]] += model.mass(i) * p;
        }
    }
    let total_mass: f64 = model.masses().iter().sum();
    for v in &mut values {
        if *v < -tol::ALGEBRAIC {
            return Err(Error::Numerical(format!("negative mass density {v}")));
        }
        *v = v.max(0.0);
    }
    let total: f64 = values.iter().sum();
    if (total - total_mass).abs() > tol::COMPLETENESS * total_mass.max(1.0) {
        return Err(Error::Numerical(format!(
            "mass density sums to {total}, expected {total_mass}"
        )));
    }
    Ok(MassDensityField { time, values })
}

/// Max-norm residual of the equation of motion at time `t`, estimated with a
/// central difference of width `h`: |(W(t+h) - W(t-h)) / 2h + i [H, W(t)]|.
/// O(h^2) for the exact evolution.
pub fn equation_of_motion_residual(w0: &DensityMatrix, model: &LatticeModel, t: f64, h: f64) -> Result<f64> {
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let w_plus = evolve_density(w0, model, t + h)?;
    let w_minus = evolve_density(w0, model, t - h)?;
    let w_t = evolve_density(w0, model, t)?;
    let hm = model.hamiltonian().entries();
    let comm = hm * w_t.entries() - w_t.entries() * hm;
    let n = model.basis_size();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let fd = (w_plus.entry(i, j) - w_minus.entry(i, j)) / C64::new(2.0 * h, 0.0);
            dev = dev.max((fd + C64::i() * comm[(i, j)]).norm());
        }
    }
    Ok(dev)
}
