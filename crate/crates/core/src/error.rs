//! Error type shared across the crate. Variants fall into two classes:
//! usage/config errors (bad model parameters, malformed input) and numerical
//! faults (validated invariants violated at runtime). [`Error::exit_code`]
//! maps the class to the process exit convention used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -- usage / configuration --
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("basis size {size} exceeds the dimension cap {cap}")]
    DimensionCapExceeded { size: usize, cap: usize },

    #[error("unknown potential '{0}'")]
    UnknownPotential(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("energy shell [{e}, {e_hi}] contains no eigenvalues")]
    EmptyShell { e: f64, e_hi: f64 },

    #[error("cell list is not a partition: index {index} {problem}")]
    NotAPartition { index: usize, problem: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty basis")]
    EmptyBasis,

    #[error("distribution supports differ: {left} vs {right}")]
    SupportMismatch { left: usize, right: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    // -- numerical faults --
    #[error("matrix is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("trace is {0}, expected 1")]
    TraceNotOne(f64),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositive { min_eigenvalue: f64 },

    #[error("state norm is {0}, expected 1")]
    NotNormalized(f64),

    #[error("vectors {i} and {j} are not orthonormal (deviation {deviation:e})")]
    NotOrthonormal { i: usize, j: usize, deviation: f64 },

    #[error("position diagonal entry {index} is negative ({value:e})")]
    NegativeDiagonal { index: usize, value: f64 },

    #[error("velocity {speed:e} exceeds 10x the step cap {cap:e} at t = {t}")]
    StepTooLarge { speed: f64, cap: f64, t: f64 },

    #[error("conditional slice norm {0:e} is below the zero threshold")]
    ZeroSlice(f64),

    #[error("collapse normalization degenerate after {attempts} resamples")]
    DegenerateDensity { attempts: usize },

    #[error("numerical fault: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code class: 2 for usage/config errors, 3 for numerical
    /// faults. Statistical failures are not errors (the run completes) and
    /// map to exit 1 at the experiment layer.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch { .. }
            | Error::DimensionCapExceeded { .. }
            | Error::UnknownPotential(_)
            | Error::InvalidModel(_)
            | Error::InvalidArgument(_)
            | Error::EmptyShell { .. }
            | Error::NotAPartition { .. }
            | Error::IndexOutOfRange { .. }
            | Error::EmptyBasis
            | Error::SupportMismatch { .. }
            | Error::Config(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::NotHermitian { .. }
            | Error::TraceNotOne(_)
            | Error::NotPositive { .. }
            | Error::NotNormalized(_)
            | Error::NotOrthonormal { .. }
            | Error::NegativeDiagonal { .. }
            | Error::StepTooLarge { .. }
            | Error::ZeroSlice(_)
            | Error::DegenerateDensity { .. }
            | Error::Numerical(_) => 3,
        }
    }
}
