//! Experiment execution and artifact output. Configs are parsed and the run
//! completes entirely in memory before anything touches the filesystem, so a
//! failed run leaves no partial output directory behind. Every run ends with
//! a manifest recording the config hash, effective seed, crate version, and
//! the SHA-256 of each artifact.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bohm::{equivariance_report, run_trajectory_ensemble, WFieldTable};
use crate::dynamics::{mass_density, PropagatorCache};
use crate::error::{Error, Result};
use crate::grw::{run_grw, GrwInitial};
use crate::hilbert::expectation;
use crate::model::{build_lattice_model, macro_decomposition};

use super::config::{BohmConfig, EvolveConfig, ExperimentConfig, GrwConfig};
use super::entropy::{curve_header, curve_point};

/// Aggregate outcome of a run: `StatFail` means the run completed but a
/// statistical acceptance check failed (process exit code 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    StatFail,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::Pass => "pass",
            Outcome::StatFail => "stat-fail",
        }
    }
}

/// What a run produced: the outcome plus the names of the files written.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: Outcome,
    pub files: Vec<String>,
}

/// In-memory artifact set, written to disk only after the whole run
/// succeeded.
pub(crate) struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub(crate) fn new() -> Self {
        Self { files: Vec::new() }
    }

    pub(crate) fn push(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    pub(crate) fn push_json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.push(name, bytes);
        Ok(())
    }
}

/// Shortest-roundtrip decimal formatting; used for all CSV numbers.
pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

#[derive(Serialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    version: String,
    files: Vec<FileEntry>,
}

/// Parse, execute, and write one experiment. `seed_override` replaces the
/// config's seed before running. Returns the outcome and the files written.
pub fn run_config_str(text: &str, out_dir: &Path, seed_override: Option<u64>) -> Result<RunResult> {
    let mut cfg = ExperimentConfig::parse(text)?;
    if let Some(seed) = seed_override {
        cfg.set_seed(seed);
    }
    let (outcome, artifacts) = execute(&cfg)?;

    std::fs::create_dir_all(out_dir)?;
    let mut entries: Vec<FileEntry> = artifacts
        .files
        .iter()
        .map(|(name, bytes)| FileEntry {
            name: name.clone(),
            sha256: sha256_hex(bytes),
        })
        .collect();
    entries.sort_by(|a, b| a.name.cmp(&b.name));
    for (name, bytes) in &artifacts.files {
        std::fs::write(out_dir.join(name), bytes)?;
    }
    let manifest = Manifest {
        config_hash: sha256_hex(text.as_bytes()),
        seed: cfg.seed(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        files: entries,
    };
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    manifest_bytes.push(b'\n');
    std::fs::write(out_dir.join("manifest.json"), &manifest_bytes)?;

    let mut files: Vec<String> = artifacts.files.iter().map(|(n, _)| n.clone()).collect();
    files.push("manifest.json".to_string());
    files.sort();
    Ok(RunResult { outcome, files })
}

fn execute(cfg: &ExperimentConfig) -> Result<(Outcome, Artifacts)> {
    match cfg {
        ExperimentConfig::Evolve(c) => run_evolve(c),
        ExperimentConfig::Bohm(c) => run_bohm(c),
        ExperimentConfig::Grw(c) => run_grw_experiment(c),
        ExperimentConfig::Entropy(c) => super::entropy::run_entropy(c),
        ExperimentConfig::Equivalence(c) => super::equivalence::run_equivalence(c),
        ExperimentConfig::Prepare(c) => super::entropy::run_prepare(c),
    }
}

fn run_evolve(cfg: &EvolveConfig) -> Result<(Outcome, Artifacts)> {
    let model = build_lattice_model(&cfg.model)?;
    cfg.schedule.validate()?;
    let w0 = cfg.state.resolve(&model)?;
    let decomp = cfg
        .macrovariable
        .as_ref()
        .map(|v| macro_decomposition(&model, v))
        .transpose()?;
    let cache = PropagatorCache::new(&model, &cfg.schedule);

    let purity0 = w0.purity();
    let energy0 = expectation(model.hamiltonian(), &w0)?.re;
    let mut trace_drift = 0.0f64;
    let mut purity_drift = 0.0f64;
    let mut energy_drift = 0.0f64;

    let mut curve = decomp.as_ref().map(|d| curve_header(d.len()));
    let mut mass_csv = cfg.mass_density.then(|| String::from("t,x,mass_density\n"));
    let mut final_state = w0.clone();
    for t in cfg.schedule.times() {
        let wt = cache.at(t)?.apply_density(&w0)?;
        trace_drift = trace_drift.max((wt.trace() - 1.0).abs());
        purity_drift = purity_drift.max((wt.purity() - purity0).abs());
        energy_drift = energy_drift.max((expectation(model.hamiltonian(), &wt)?.re - energy0).abs());
        if let (Some(csv), Some(d)) = (curve.as_mut(), decomp.as_ref()) {
            let (row, _) = curve_point(t, &wt, d)?;
            csv.push_str(&row);
        }
        if let Some(csv) = mass_csv.as_mut() {
            let field = mass_density(&wt, &model, t)?;
            for (site, v) in field.values.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    fmt_f(t),
                    fmt_f(site as f64 * model.spacing()),
                    fmt_f(*v)
                ));
            }
        }
        final_state = wt;
    }

    let report = serde_json::json!({
        "experiment": "evolve",
        "outcome": "pass",
        "basis_size": model.basis_size(),
        "initial_purity": purity0,
        "initial_energy": energy0,
        "trace_drift": trace_drift,
        "purity_drift": purity_drift,
        "energy_drift": energy_drift,
        "t_end": cfg.schedule.t_end,
    });
    let mut artifacts = Artifacts::new();
    if let Some(csv) = curve {
        artifacts.push("curve.csv", csv.into_bytes());
    }
    if let Some(csv) = mass_csv {
        artifacts.push("mass_density.csv", csv.into_bytes());
    }
    artifacts.push("final_state.json", {
        let mut b = serde_json::to_vec_pretty(&final_state)?;
        b.push(b'\n');
        b
    });
    artifacts.push_json("report.json", &report)?;
    Ok((Outcome::Pass, artifacts))
}

fn run_bohm(cfg: &BohmConfig) -> Result<(Outcome, Artifacts)> {
    let model = build_lattice_model(&cfg.model)?;
    cfg.schedule.validate()?;
    if cfg.trajectories < 100 {
        return Err(Error::Config(format!(
            "need at least 100 trajectories, got {}",
            cfg.trajectories
        )));
    }
    if !cfg.tv_threshold.is_finite() || cfg.tv_threshold <= 0.0 {
        return Err(Error::Config(format!(
            "tv_threshold must be positive, got {}",
            cfg.tv_threshold
        )));
    }
    let w0 = cfg.state.resolve(&model)?;
    let cache = PropagatorCache::new(&model, &cfg.schedule);
    let table = WFieldTable::from_density(&w0, &cache)?;
    let trajectories = run_trajectory_ensemble(&table, &w0, cfg.trajectories, cfg.seed)?;
    let report = equivariance_report(&table, &trajectories, &cfg.checkpoints, cfg.tv_threshold)
        .map_err(|e| match e {
            // Off-grid checkpoints are a config mistake here.
            Error::InvalidArgument(msg) => Error::Config(msg),
            other => other,
        })?;

    let mut artifacts = Artifacts::new();
    if cfg.emit_trajectories {
        let n = model.n_particles();
        let mut csv = String::from("t");
        for i in 1..=n {
            csv.push_str(&format!(",q_{i}"));
        }
        csv.push_str(",stream_id\n");
        for traj in &trajectories {
            for (k, t) in traj.times.iter().enumerate() {
                csv.push_str(&fmt_f(*t));
                for &x in traj.at_step(k) {
                    csv.push(',');
                    csv.push_str(&fmt_f(x));
                }
                csv.push_str(&format!(",{}\n", traj.stream_index));
            }
        }
        artifacts.push("trajectories.csv", csv.into_bytes());
    }

    let outcome = if report.pass { Outcome::Pass } else { Outcome::StatFail };
    let rows: Vec<serde_json::Value> = report
        .checkpoints
        .iter()
        .map(|r| {
            serde_json::json!({
                "t": r.t,
                "tv_distance": r.tv_distance,
                "samples": r.samples,
            })
        })
        .collect();
    let report_json = serde_json::json!({
        "experiment": "bohm",
        "outcome": outcome.as_str(),
        "trajectories": cfg.trajectories,
        "tv_threshold": cfg.tv_threshold,
        "checkpoints": rows,
    });
    artifacts.push_json("report.json", &report_json)?;
    Ok((outcome, artifacts))
}

fn run_grw_experiment(cfg: &GrwConfig) -> Result<(Outcome, Artifacts)> {
    let model = build_lattice_model(&cfg.model)?;
    cfg.params.validate()?;
    if !cfg.t_end.is_finite() || cfg.t_end <= 0.0 {
        return Err(Error::Config(format!("t_end must be positive, got {}", cfg.t_end)));
    }
    if cfg.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("checkpoints must be strictly increasing".into()));
    }
    if cfg.checkpoints.iter().any(|&t| t < 0.0 || t > cfg.t_end) {
        return Err(Error::Config("checkpoints must lie within [0, t_end]".into()));
    }
    let init = match cfg.state.resolve_pure(&model)? {
        Some(psi) => GrwInitial::Pure(psi),
        None => GrwInitial::Density(cfg.state.resolve(&model)?),
    };
    // Always snapshot the end of the run so final_state.json exists.
    let mut checkpoints = cfg.checkpoints.clone();
    if checkpoints.last() != Some(&cfg.t_end) {
        checkpoints.push(cfg.t_end);
    }
    let run = run_grw(&model, &init, &cfg.params, cfg.t_end, &checkpoints, cfg.seed, cfg.mass_density)?;

    let mut flashes = String::from("t,k,x,kind\n");
    for f in &run.flashes {
        flashes.push_str(&format!("{},{},{},{}\n", fmt_f(f.t), f.particle, fmt_f(f.center), f.kind));
    }

    let mut artifacts = Artifacts::new();
    artifacts.push("flashes.csv", flashes.into_bytes());
    if let Some(fields) = &run.mass_density {
        let mut csv = String::from("t,x,mass_density\n");
        for field in fields {
            for (site, v) in field.values.iter().enumerate() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    fmt_f(field.time),
                    fmt_f(site as f64 * model.spacing()),
                    fmt_f(*v)
                ));
            }
        }
        artifacts.push("mass_density.csv", csv.into_bytes());
    }

    let final_state = &run.snapshots.last().expect("t_end snapshot always present").state;
    artifacts.push("final_state.json", {
        let mut b = serde_json::to_vec_pretty(final_state)?;
        b.push(b'\n');
        b
    });

    let snapshots: Vec<serde_json::Value> = run
        .snapshots
        .iter()
        .map(|s| {
            serde_json::json!({
                "t": s.t,
                "trace": s.state.trace(),
                "purity": s.state.purity(),
            })
        })
        .collect();
    let expected = model.n_particles() as f64 * cfg.params.lambda * cfg.t_end;
    let report = serde_json::json!({
        "experiment": "grw",
        "outcome": "pass",
        "flash_count": run.flashes.len(),
        "expected_flash_count": expected,
        "snapshots": snapshots,
    });
    artifacts.push_json("report.json", &report)?;
    Ok((Outcome::Pass, artifacts))
}
