//! Config-driven experiments: parse a JSON description, run it, and write
//! CSV/JSON artifacts plus a manifest into an output directory.

mod config;
mod entropy;
mod equivalence;
mod runner;

pub use config::{
    BandCheck, BohmConfig, EntropyConfig, EquivalenceConfig, EvolveConfig, ExperimentConfig, FloorCheck, GrwConfig,
    PrepareConfig, PureStateSpec, StateSpec, WeightedPure, CONFIG_SCHEMA,
};
pub use runner::{run_config_str, Outcome, RunResult};
