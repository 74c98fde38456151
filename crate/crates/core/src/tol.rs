//! Central numerical tolerances. Every threshold used by validation or
//! regularization lives here so the policy is auditable in one place.

/// Algebraic identities: hermiticity, trace, orthonormality, positivity slack.
pub const ALGEBRAIC: f64 = 1e-10;

/// Spectral residuals: eigendecomposition reconstruction and eigenvector
/// unitarity, relative to the max-norm of the operator.
pub const SPECTRAL: f64 = 1e-8;

/// Resolution of identity, propagator unitarity, trace drift over a run.
pub const COMPLETENESS: f64 = 1e-9;

/// Eigenvalues of a density matrix in [-CLIP, 0) are clipped to 0 and the
/// state renormalized; anything below -CLIP is rejected as not positive.
pub const EIGENVALUE_CLIP: f64 = 1e-10;

/// Relative node threshold for guidance velocities: where the position
/// diagonal falls below NODE_REL * max_diag the velocity is defined as 0.
pub const NODE_REL: f64 = 1e-12;

/// Tie window for closed-interval membership tests on eigenvalues
/// (energy-shell boundaries).
pub const SHELL_TIE: f64 = 1e-12;

/// A conditional slice with norm below this is rejected as zero.
pub const ZERO_SLICE: f64 = 1e-12;

/// A collapse whose normalization falls below this is degenerate and the
/// center is resampled.
pub const DEGENERATE_COLLAPSE: f64 = 1e-14;

/// Velocities are clamped to cap = dx/dt when within a factor 10 of it;
/// beyond 10x the cap the step is a hard fault.
pub const VELOCITY_CAP_FACTOR: f64 = 10.0;

/// Macro-assignment margin: a state is assigned to a cell iff the largest
/// branch weight exceeds 1 - MACRO_MARGIN.
pub const MACRO_MARGIN: f64 = 0.1;

/// Fixed significance level for the statistical tests.
pub const SIGNIFICANCE: f64 = 0.01;

/// Checkpoints must sit on the schedule grid within this.
pub const GRID_SNAP: f64 = 1e-9;

/// Step size for central-difference residual checks of the equation of
/// motion (d/dt W = -i[H, W]).
pub const RESIDUAL_H: f64 = 1e-3;
