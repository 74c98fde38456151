//! Two-arm statistical comparison of guidance laws. Arm A draws, per
//! trajectory, a pure state from a weighted ensemble and guides along that
//! state; arm B guides every trajectory along the density matrix of the
//! ensemble. Position marginals must agree at every checkpoint; a
//! two-sample KS test per checkpoint and particle decides. Replacing arm
//! B's mixture weights (`corrupt_arm_b`) breaks the agreement and must be
//! detected.

use rayon::prelude::*;

use crate::bohm::{integrate_trajectory, sample_config_from_law, Trajectory, WFieldTable};
use crate::dynamics::PropagatorCache;
use crate::error::{Error, Result};
use crate::hilbert::{make_density, PureState};
use crate::model::LatticeModel;
use crate::rng::{arm_index, stream_rng, StreamKind};
use crate::stats::{ks_two_sample, StatReport};
use crate::tol;

use super::config::{validated_weights, EquivalenceConfig};
use super::runner::{Artifacts, Outcome};

fn weighted_pick(weights: &[f64], rng: &mut impl rand::Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Integrate arm A: per-trajectory component pick, then guidance along that
/// component's table.
fn run_arm_a(
    model: &LatticeModel,
    tables: &[WFieldTable],
    weights: &[f64],
    m: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..m)
        .into_par_iter()
        .map(|i| {
            let idx = arm_index(0, i as u32);
            let mut pick = stream_rng(seed, StreamKind::StatePick, idx);
            let c = weighted_pick(weights, &mut pick);
            let mut rng = stream_rng(seed, StreamKind::Trajectory, idx);
            let q0 = sample_config_from_law(tables[c].exact_law(0), model, &mut rng)?;
            integrate_trajectory(&tables[c], &q0, i as u64)
        })
        .collect()
}

/// Integrate arm B: every trajectory guided by the single density table.
fn run_arm_b(model: &LatticeModel, table: &WFieldTable, m: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..m)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, StreamKind::Trajectory, arm_index(1, i as u32));
            let q0 = sample_config_from_law(table.exact_law(0), model, &mut rng)?;
            integrate_trajectory(table, &q0, i as u64)
        })
        .collect()
}

pub(crate) fn run_equivalence(cfg: &EquivalenceConfig) -> Result<(Outcome, Artifacts)> {
    let model = crate::model::build_lattice_model(&cfg.model)?;
    cfg.schedule.validate()?;
    if cfg.trajectories < 100 {
        return Err(Error::Config(format!(
            "need at least 100 trajectories per arm, got {}",
            cfg.trajectories
        )));
    }
    let weights = validated_weights(&cfg.components)?;
    let states: Vec<PureState> = cfg
        .components
        .iter()
        .map(|c| c.state.resolve(&model))
        .collect::<Result<_>>()?;

    let b_weights = match &cfg.corrupt_arm_b {
        None => weights.clone(),
        Some(alt) => {
            if alt.len() != weights.len() {
                return Err(Error::Config(format!(
                    "corrupt_arm_b has {} weights, the mixture has {}",
                    alt.len(),
                    weights.len()
                )));
            }
            if alt.iter().any(|&w| !w.is_finite() || w < 0.0) {
                return Err(Error::Config("corrupt_arm_b weights must be nonnegative".into()));
            }
            let total: f64 = alt.iter().sum();
            if total <= 0.0 {
                return Err(Error::Config("corrupt_arm_b weights sum to zero".into()));
            }
            alt.iter().map(|w| w / total).collect()
        }
    };
    let w_b = make_density(&b_weights, &states)?;

    let steps: Vec<usize> = cfg
        .checkpoints
        .iter()
        .map(|&t| {
            cfg.schedule
                .grid_index(t)
                .ok_or_else(|| Error::Config(format!("checkpoint {t} is not on the schedule grid")))
        })
        .collect::<Result<_>>()?;
    if steps.is_empty() {
        return Err(Error::Config("need at least one checkpoint".into()));
    }

    let cache = PropagatorCache::new(&model, &cfg.schedule);
    let tables: Vec<WFieldTable> = states
        .iter()
        .map(|s| WFieldTable::from_pure(s, &cache))
        .collect::<Result<_>>()?;
    let table_b = WFieldTable::from_density(&w_b, &cache)?;

    let arm_a = run_arm_a(&model, &tables, &weights, cfg.trajectories, cfg.seed)?;
    let arm_b = run_arm_b(&model, &table_b, cfg.trajectories, cfg.seed)?;

    let n = model.n_particles();
    let mut rows = Vec::new();
    let mut all_pass = true;
    for (&t, &step) in cfg.checkpoints.iter().zip(&steps) {
        for particle in 0..n {
            let a: Vec<f64> = arm_a.iter().map(|traj| traj.at_step(step)[particle]).collect();
            let b: Vec<f64> = arm_b.iter().map(|traj| traj.at_step(step)[particle]).collect();
            let report: StatReport = ks_two_sample(&a, &b, tol::SIGNIFICANCE)?;
            all_pass &= report.pass;
            rows.push(serde_json::json!({
                "t": t,
                "particle": particle,
                "statistic": report.statistic,
                "threshold": report.threshold,
                "p_value": report.p_value,
                "pass": report.pass,
            }));
        }
    }

    let outcome = if all_pass { Outcome::Pass } else { Outcome::StatFail };
    let report = serde_json::json!({
        "experiment": "equivalence",
        "outcome": outcome.as_str(),
        "trajectories": cfg.trajectories,
        "components": weights.len(),
        "arm_b_corrupted": cfg.corrupt_arm_b.is_some(),
        "significance": tol::SIGNIFICANCE,
        "comparisons": rows,
    });
    let mut artifacts = Artifacts::new();
    artifacts.push_json("report.json", &report)?;
    Ok((outcome, artifacts))
}
