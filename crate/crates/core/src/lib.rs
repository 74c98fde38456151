//! Finite-dimensional simulator for quantum theories whose fundamental state
//! is a density matrix W rather than a wavefunction.
//!
//! The crate builds 1-D lattice models of N distinguishable particles (with
//! optional spin), evolves density matrices and pure states exactly through
//! the spectral decomposition of the Hamiltonian, and implements three
//! dynamical layers on top of W:
//!
//! - [`bohm`]: deterministic particle trajectories guided by W, sampled from
//!   its position diagonal, with an equivariance check against the exact law.
//! - [`grw`]: spontaneous-collapse dynamics (Poisson flashes, Gaussian
//!   collapse operators) for both density matrices and pure states.
//! - [`model`] + [`experiments`]: macrostate decompositions, Boltzmann
//!   entropy, uniform projection states on a subspace, and Monte Carlo
//!   experiments (equivariance, mixture equivalence, entropy curves).
//!
//! Numerical conventions: hbar = 1, k_B = 1, masses and lattice spacing set
//! the hopping scale. All validated types reject states outside tolerance
//! instead of silently repairing them; see [`tol`] for the thresholds.

pub mod bohm;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod grw;
pub mod hilbert;
pub mod model;
pub mod rng;
pub mod stats;
pub mod tol;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;
