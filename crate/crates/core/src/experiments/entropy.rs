//! Macro occupation and Boltzmann-entropy curves: evolve a state on the
//! schedule grid, record the occupation p_nu(t) of every macro cell, assign
//! a definite macrostate where one cell dominates, and run optional
//! band/floor checks on the equilibrium occupation.

use rand_distr::{Distribution, StandardNormal};

use crate::dynamics::{branch_weights, PropagatorCache};
use crate::error::{Error, Result};
use crate::hilbert::{spectral_decompose, DensityMatrix, Operator, PureState};
use crate::model::{boltzmann_entropy, macro_decomposition, MacroDecomposition};
use crate::rng::{stream_rng, StreamKind};
use crate::tol;

use super::config::EntropyConfig;
use super::runner::{fmt_f, Artifacts, Outcome};

/// One evaluated point of a macro occupation curve.
pub(crate) struct CurvePoint {
    pub t: f64,
    pub weights: Vec<f64>,
    pub p_eq: f64,
    pub assigned: Option<usize>,
}

pub(crate) fn curve_header(cells: usize) -> String {
    let mut h = String::from("t");
    for k in 0..cells {
        h.push_str(&format!(",p_{k}"));
    }
    h.push_str(",dominant,assigned,entropy,p_eq\n");
    h
}

/// Evaluate the curve at one time. A macrostate is assigned when the
/// dominant cell holds at least 1 - MACRO_MARGIN of the weight; entropy is
/// only defined for assigned points.
pub(crate) fn curve_point(
    t: f64,
    w: &DensityMatrix,
    decomp: &MacroDecomposition,
) -> Result<(String, CurvePoint)> {
    let weights = branch_weights(w, decomp)?;
    let dominant = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(k, _)| k)
        .unwrap();
    let assigned = (weights[dominant] >= 1.0 - tol::MACRO_MARGIN).then_some(dominant);
    let p_eq = weights[decomp.equilibrium_index()];
    let mut row = fmt_f(t);
    for &p in &weights {
        row.push(',');
        row.push_str(&fmt_f(p));
    }
    row.push_str(&format!(",{dominant}"));
    match assigned {
        Some(k) => row.push_str(&format!(",{k},{}", fmt_f(boltzmann_entropy(decomp, k)?))),
        None => row.push_str(",,"),
    }
    row.push(',');
    row.push_str(&fmt_f(p_eq));
    row.push('\n');
    Ok((row, CurvePoint { t, weights, p_eq, assigned }))
}

/// Trapezoid time average of (t, y) samples.
fn time_average(points: &[(f64, f64)]) -> f64 {
    let span = points.last().unwrap().0 - points[0].0;
    let mut acc = 0.0;
    for pair in points.windows(2) {
        acc += 0.5 * (pair[0].1 + pair[1].1) * (pair[1].0 - pair[0].0);
    }
    acc / span
}

/// Draw a normalized pure state whose ensemble average is `w`: Gaussian
/// coefficients on the eigenvectors, scaled by the square roots of the
/// eigenvalues. For a uniform state on a subspace this is the rotation-
/// invariant law on that subspace.
pub(crate) fn sample_pure_from_density(
    w: &DensityMatrix,
    rng: &mut impl rand::Rng,
) -> Result<PureState> {
    let eigen = spectral_decompose(&Operator::hermitian(w.entries().clone())?)?;
    let dim = w.dim();
    let mut amps = nalgebra::DVector::from_element(dim, crate::C64::new(0.0, 0.0));
    for (k, &l) in eigen.eigenvalues().iter().enumerate() {
        if l <= 0.0 {
            continue;
        }
        let g = crate::C64::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
        let scale = g * l.sqrt();
        let col = eigen.eigenvectors().column(k);
        for i in 0..dim {
            amps[i] += col[i] * scale;
        }
    }
    let norm = amps.norm();
    if norm < tol::ZERO_SLICE {
        return Err(Error::Numerical("sampled pure state has zero norm".into()));
    }
    PureState::new(amps / crate::C64::new(norm, 0.0))
}

pub(crate) fn run_entropy(cfg: &EntropyConfig) -> Result<(Outcome, Artifacts)> {
    let model = crate::model::build_lattice_model(&cfg.model)?;
    cfg.schedule.validate()?;
    let decomp = macro_decomposition(&model, &cfg.macrovariable)?;
    let w0 = cfg.state.resolve(&model)?;
    if w0.dim() != model.basis_size() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_size(),
            got: w0.dim(),
        });
    }
    let cache = PropagatorCache::new(&model, &cfg.schedule);

    let mut curve = curve_header(decomp.len());
    let mut points = Vec::new();
    for t in cfg.schedule.times() {
        let wt = cache.at(t)?.apply_density(&w0)?;
        let (row, point) = curve_point(t, &wt, &decomp)?;
        curve.push_str(&row);
        points.push(point);
    }

    let eq = decomp.equilibrium_index();
    let s_eq = boltzmann_entropy(&decomp, eq)?;
    let min_p_eq = points.iter().map(|p| p.p_eq).fold(f64::INFINITY, f64::min);

    let mut checks = serde_json::Map::new();
    let mut pass = true;

    if let Some(band) = &cfg.band {
        let finite = band.t_min.is_finite() && band.t_max.is_finite() && band.tolerance.is_finite();
        if !finite || band.t_max <= band.t_min || band.tolerance < 0.0 {
            return Err(Error::Config("band check needs t_max > t_min and tolerance >= 0".into()));
        }
        let window: Vec<(f64, f64)> = points
            .iter()
            .filter(|p| p.t >= band.t_min - tol::GRID_SNAP && p.t <= band.t_max + tol::GRID_SNAP)
            .map(|p| (p.t, p.p_eq))
            .collect();
        if window.len() < 2 {
            return Err(Error::Config(format!(
                "band window [{}, {}] contains {} grid points, need at least 2",
                band.t_min,
                band.t_max,
                window.len()
            )));
        }
        let average = time_average(&window);
        let ok = (average - band.target).abs() <= band.tolerance;
        pass &= ok;
        checks.insert(
            "band".into(),
            serde_json::json!({
                "t_min": band.t_min,
                "t_max": band.t_max,
                "target": band.target,
                "tolerance": band.tolerance,
                "average": average,
                "pass": ok,
            }),
        );
    }

    if let Some(floor) = &cfg.floor {
        let ok = min_p_eq >= floor.floor;
        pass &= ok;
        checks.insert(
            "floor".into(),
            serde_json::json!({
                "floor": floor.floor,
                "min_p_eq": min_p_eq,
                "pass": ok,
            }),
        );
    }

    let mut artifacts = Artifacts::new();
    artifacts.push("curve.csv", curve.into_bytes());

    if let Some(n) = cfg.psi_samples {
        if n == 0 {
            return Err(Error::Config("psi_samples must be positive when present".into()));
        }
        let p_eq_op = decomp.cells()[eq].subspace.projector();
        let mut csv = String::from("sample,t,p_eq\n");
        for j in 0..n {
            let mut rng = stream_rng(cfg.seed, StreamKind::StatePick, j as u64);
            let psi = sample_pure_from_density(&w0, &mut rng)?;
            for t in cfg.schedule.times() {
                let psi_t = cache.at(t)?.apply_pure(&psi)?;
                let p = crate::hilbert::expectation(p_eq_op, &psi_t.projector()?)?.re;
                csv.push_str(&format!("{j},{},{}\n", fmt_f(t), fmt_f(p)));
            }
        }
        artifacts.push("psi_curves.csv", csv.into_bytes());
    }

    let outcome = if pass { Outcome::Pass } else { Outcome::StatFail };
    let cells: Vec<serde_json::Value> = decomp
        .cells()
        .iter()
        .enumerate()
        .map(|(k, c)| {
            serde_json::json!({
                "label": c.label,
                "dim": c.subspace.dim(),
                "entropy": (c.subspace.dim() as f64).ln(),
                "equilibrium": k == eq,
            })
        })
        .collect();
    let report = serde_json::json!({
        "experiment": "entropy",
        "outcome": outcome.as_str(),
        "variable": decomp.variable(),
        "cells": cells,
        "s_eq": s_eq,
        "min_p_eq": min_p_eq,
        "initial_assigned": points[0].assigned,
        "initial_entropy": points[0].assigned.map(|k| boltzmann_entropy(&decomp, k).unwrap()),
        "final_weights": points.last().unwrap().weights,
        "checks": checks,
    });
    artifacts.push_json("report.json", &report)?;
    Ok((outcome, artifacts))
}

pub(crate) fn run_prepare(cfg: &super::config::PrepareConfig) -> Result<(Outcome, Artifacts)> {
    let model = crate::model::build_lattice_model(&cfg.model)?;
    cfg.schedule.validate()?;
    let decomp = macro_decomposition(&model, &cfg.macrovariable)?;
    let cell = decomp.cells().get(cfg.cell).ok_or(Error::IndexOutOfRange {
        index: cfg.cell,
        len: decomp.len(),
    })?;
    let w0 = crate::model::uniform_state(&cell.subspace)?;

    // Algebraic identities of the prepared state: unit weight on its cell,
    // purity 1/dim, entropy ln dim.
    let dim = cell.subspace.dim();
    let support_weight = crate::hilbert::expectation(cell.subspace.projector(), &w0)?.re;
    let purity_defect = (w0.purity() * dim as f64 - 1.0).abs();
    let entropy = boltzmann_entropy(&decomp, cfg.cell)?;
    let algebra_ok = (support_weight - 1.0).abs() <= tol::ALGEBRAIC && purity_defect <= tol::ALGEBRAIC;

    let cache = PropagatorCache::new(&model, &cfg.schedule);
    let mut curve = curve_header(decomp.len());
    let mut points = Vec::new();
    for t in cfg.schedule.times() {
        let wt = cache.at(t)?.apply_density(&w0)?;
        let (row, point) = curve_point(t, &wt, &decomp)?;
        curve.push_str(&row);
        points.push(point);
    }

    let eq = decomp.equilibrium_index();
    let outcome = if algebra_ok { Outcome::Pass } else { Outcome::StatFail };
    let report = serde_json::json!({
        "experiment": "prepare",
        "outcome": outcome.as_str(),
        "cell": cfg.cell,
        "cell_label": cell.label,
        "dim": dim,
        "entropy": entropy,
        "s_eq": boltzmann_entropy(&decomp, eq)?,
        "support_weight": support_weight,
        "purity_defect": purity_defect,
        "initial_p_eq": points[0].p_eq,
        "final_weights": points.last().unwrap().weights,
    });
    let mut artifacts = Artifacts::new();
    artifacts.push("curve.csv", curve.into_bytes());
    artifacts.push_json("report.json", &report)?;
    Ok((outcome, artifacts))
}
