//! Validated linear-algebra types: pure states, density matrices, operators,
//! eigendecompositions. Constructors enforce the defining invariants
//! (normalization, hermiticity, unit trace, positivity) and reject anything
//! outside tolerance; downstream code can therefore assume validity.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::LatticeModel;
use crate::{tol, C64};

/// Max entrywise deviation from hermiticity, |M - M†|.
pub fn hermitian_deviation(m: &DMatrix<C64>) -> f64 {
    let mut dev: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

/// Max entrywise modulus.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

// ---------------------------------------------------------------------------
// PureState
// ---------------------------------------------------------------------------

/// Normalized state vector. Norm is 1 within [`tol::ALGEBRAIC`].
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amplitudes: DVector<C64>,
}

impl PureState {
    pub fn new(amplitudes: DVector<C64>) -> Result<Self> {
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > tol::ALGEBRAIC {
            return Err(Error::NotNormalized(norm));
        }
        Ok(Self { amplitudes })
    }

    /// Normalize an arbitrary nonzero vector.
    pub fn normalized(amplitudes: DVector<C64>) -> Result<Self> {
        let norm = amplitudes.norm();
        if norm < tol::ZERO_SLICE {
            return Err(Error::ZeroSlice(norm));
        }
        Ok(Self {
            amplitudes: amplitudes / C64::new(norm, 0.0),
        })
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn amplitude(&self, i: usize) -> C64 {
        self.amplitudes[i]
    }

    /// |psi><psi| as a density matrix.
    pub fn projector(&self) -> Result<DensityMatrix> {
        let n = self.dim();
        let m = DMatrix::from_fn(n, n, |i, j| self.amplitudes[i] * self.amplitudes[j].conj());
        DensityMatrix::new(m)
    }

    pub fn inner(&self, other: &PureState) -> C64 {
        self.amplitudes.dotc(&other.amplitudes)
    }
}

// ---------------------------------------------------------------------------
// DensityMatrix
// ---------------------------------------------------------------------------

/// Positive semidefinite, Hermitian, unit-trace matrix. Eigenvalues in
/// [-[`tol::EIGENVALUE_CLIP`], 0) are clipped to 0 and the state renormalized;
/// anything more negative is rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    entries: DMatrix<C64>,
}

impl DensityMatrix {
    pub fn new(entries: DMatrix<C64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        if entries.nrows() == 0 {
            return Err(Error::EmptyBasis);
        }
        let dev = hermitian_deviation(&entries);
        if dev > tol::ALGEBRAIC {
            return Err(Error::NotHermitian { deviation: dev });
        }
        let tr = entries.diagonal().iter().sum::<C64>();
        if (tr.re - 1.0).abs() > tol::ALGEBRAIC || tr.im.abs() > tol::ALGEBRAIC {
            return Err(Error::TraceNotOne(tr.re));
        }
        // Positivity via the spectrum of the hermitized part.
        let n = entries.nrows();
        let herm = DMatrix::from_fn(n, n, |i, j| (entries[(i, j)] + entries[(j, i)].conj()) * 0.5);
        let eig = herm.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < -tol::EIGENVALUE_CLIP {
            return Err(Error::NotPositive {
                min_eigenvalue: min_eig,
            });
        }
        if min_eig >= 0.0 {
            return Ok(Self { entries });
        }
        // Clip the slightly negative eigenvalues and renormalize; only this
        // path reconstructs, so exactly valid inputs pass through untouched.
        let clipped: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
        let total: f64 = clipped.iter().sum();
        let q = &eig.eigenvectors;
        let mut rebuilt = DMatrix::zeros(n, n);
        for (k, &l) in clipped.iter().enumerate() {
            if l == 0.0 {
                continue;
            }
            let col = q.column(k);
            let w = l / total;
            for i in 0..n {
                for j in 0..n {
                    rebuilt[(i, j)] += col[i] * col[j].conj() * w;
                }
            }
        }
        Ok(Self { entries: rebuilt })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.entries[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.entries.diagonal().iter().map(|z| z.re).sum()
    }

    /// tr(W^2); 1/dim <= purity <= 1 for a valid state.
    pub fn purity(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Real part of the diagonal (position-basis probabilities).
    pub fn diagonal_real(&self) -> Vec<f64> {
        self.entries.diagonal().iter().map(|z| z.re).collect()
    }

    /// Maximally mixed state I/dim.
    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyBasis);
        }
        let w = 1.0 / dim as f64;
        Self::new(DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                C64::new(w, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }))
    }
}

// ---------------------------------------------------------------------------
// Operator
// ---------------------------------------------------------------------------

/// Square matrix with a hermiticity flag measured at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    entries: DMatrix<C64>,
    hermitian: bool,
}

impl Operator {
    /// Flag is measured: hermitian iff deviation <= [`tol::ALGEBRAIC`].
    pub fn new(entries: DMatrix<C64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch {
                expected: entries.nrows(),
                got: entries.ncols(),
            });
        }
        let hermitian = hermitian_deviation(&entries) <= tol::ALGEBRAIC;
        Ok(Self { entries, hermitian })
    }

    /// Rejects matrices that are not Hermitian within tolerance.
    pub fn hermitian(entries: DMatrix<C64>) -> Result<Self> {
        let op = Self::new(entries)?;
        if !op.hermitian {
            return Err(Error::NotHermitian {
                deviation: hermitian_deviation(&op.entries),
            });
        }
        Ok(op)
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<C64> {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> C64 {
        self.entries[(i, j)]
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    /// Max entrywise deviation of U†U from the identity.
    pub fn unitarity_deviation(&self) -> f64 {
        let n = self.dim();
        let prod = self.entries.adjoint() * &self.entries;
        let mut dev: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
                dev = dev.max((prod[(i, j)] - target).norm());
            }
        }
        dev
    }
}

// ---------------------------------------------------------------------------
// EigenSystem
// ---------------------------------------------------------------------------

/// Eigendecomposition of a Hermitian operator: ascending real eigenvalues and
/// matching orthonormal eigenvector columns. Validated on construction:
/// reconstruction within [`tol::SPECTRAL`] * max(1, |H|max) and eigenvector
/// unitarity within [`tol::SPECTRAL`].
#[derive(Debug, Clone)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<C64>,
}

impl EigenSystem {
    fn validated(eigenvalues: Vec<f64>, eigenvectors: DMatrix<C64>, original: &DMatrix<C64>) -> Result<Self> {
        let n = original.nrows();
        let scale = max_abs(original).max(1.0);
        let mut recon = DMatrix::zeros(n, n);
        for (k, &l) in eigenvalues.iter().enumerate() {
            let col = eigenvectors.column(k);
            for i in 0..n {
                for j in 0..n {
                    recon[(i, j)] += col[i] * col[j].conj() * l;
                }
            }
        }
        let recon_err = max_abs(&(recon - original));
        if recon_err > tol::SPECTRAL * scale {
            return Err(Error::Numerical(format!(
                "eigendecomposition reconstruction error {recon_err:e} exceeds tolerance"
            )));
        }
        let unit = Operator::new(eigenvectors.clone())?.unitarity_deviation();
        if unit > tol::SPECTRAL {
            return Err(Error::Numerical(format!(
                "eigenvector unitarity error {unit:e} exceeds tolerance"
            )));
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Columns match `eigenvalues()` order.
    pub fn eigenvectors(&self) -> &DMatrix<C64> {
        &self.eigenvectors
    }

    pub fn eigenvector(&self, k: usize) -> DVector<C64> {
        self.eigenvectors.column(k).into_owned()
    }
}

/// Eigendecomposition of a Hermitian operator, eigenvalues sorted ascending.
pub fn spectral_decompose(op: &Operator) -> Result<EigenSystem> {
    if !op.is_hermitian() {
        return Err(Error::NotHermitian {
            deviation: hermitian_deviation(op.entries()),
        });
    }
    let n = op.dim();
    let entries = op.entries();
    // Hermitize exactly before handing to the solver; validation compares
    // against the original entries.
    let herm = DMatrix::from_fn(n, n, |i, j| (entries[(i, j)] + entries[(j, i)].conj()) * 0.5);
    let eig = herm.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    EigenSystem::validated(eigenvalues, eigenvectors, entries)
}

// ---------------------------------------------------------------------------
// Construction helpers
// ---------------------------------------------------------------------------

/// Mixture sum_k w_k |psi_k><psi_k|. Weights must be nonnegative and sum to 1
/// within [`tol::ALGEBRAIC`]; all states share one dimension.
pub fn make_density(weights: &[f64], states: &[PureState]) -> Result<DensityMatrix> {
    if weights.len() != states.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} states",
            weights.len(),
            states.len()
        )));
    }
    if states.is_empty() {
        return Err(Error::EmptyBasis);
    }
    let dim = states[0].dim();
    for s in states {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
    }
    if let Some(&w) = weights.iter().find(|&&w| w < 0.0) {
        return Err(Error::InvalidArgument(format!("negative weight {w}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > tol::ALGEBRAIC {
        return Err(Error::InvalidArgument(format!("weights sum to {total}, expected 1")));
    }
    let mut m = DMatrix::zeros(dim, dim);
    for (w, s) in weights.iter().zip(states) {
        let a = s.amplitudes();
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] += a[i] * a[j].conj() * *w;
            }
        }
    }
    DensityMatrix::new(m)
}

/// Orthogonal projector onto the span of an orthonormal vector list.
pub fn projector_onto(vectors: &[DVector<C64>], dim: usize) -> Result<Operator> {
    if vectors.is_empty() {
        return Err(Error::EmptyBasis);
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    for i in 0..vectors.len() {
        for j in i..vectors.len() {
            let target = if i == j { 1.0 } else { 0.0 };
            let overlap = vectors[i].dotc(&vectors[j]);
            let dev = (overlap - C64::new(target, 0.0)).norm();
            if dev > tol::ALGEBRAIC {
                return Err(Error::NotOrthonormal { i, j, deviation: dev });
            }
        }
    }
    let mut p = DMatrix::zeros(dim, dim);
    for v in vectors {
        for i in 0..dim {
            for j in 0..dim {
                p[(i, j)] += v[i] * v[j].conj();
            }
        }
    }
    Operator::hermitian(p)
}

/// tr(A W). Real within tolerance when A is Hermitian.
pub fn expectation(op: &Operator, w: &DensityMatrix) -> Result<C64> {
    if op.dim() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: w.dim(),
            got: op.dim(),
        });
    }
    let a = op.entries();
    let m = w.entries();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * m[(j, i)];
        }
    }
    Ok(acc)
}

/// Trace out the spin factor: W over (site, spin) -> W over sites only.
/// With spin dimension 1 this is the identity map.
pub fn partial_trace_spin(w: &DensityMatrix, model: &LatticeModel) -> Result<DensityMatrix> {
    if w.dim() != model.basis_size() {
        return Err(Error::DimensionMismatch {
            expected: model.basis_size(),
            got: w.dim(),
        });
    }
    let k = model.spin_size();
    if k == 1 {
        return Ok(w.clone());
    }
    let s = model.spatial_size();
    let m = w.entries();
    let mut out = DMatrix::zeros(s, s);
    for a in 0..s {
        for b in 0..s {
            let mut acc = C64::new(0.0, 0.0);
            for sigma in 0..k {
                acc += m[(a * k + sigma, b * k + sigma)];
            }
            out[(a, b)] = acc;
        }
    }
    DensityMatrix::new(out)
}

// ---------------------------------------------------------------------------
// Serialization: {dim, entries: [[re, im], ...]} row-major
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    dim: usize,
    entries: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct VectorRepr {
    dim: usize,
    amplitudes: Vec<[f64; 2]>,
}

fn matrix_to_repr(m: &DMatrix<C64>) -> MatrixRepr {
    let dim = m.nrows();
    let mut entries = Vec::with_capacity(dim * dim);
    for i in 0..dim {
        for j in 0..dim {
            entries.push([m[(i, j)].re, m[(i, j)].im]);
        }
    }
    MatrixRepr { dim, entries }
}

fn matrix_from_repr(repr: &MatrixRepr) -> std::result::Result<DMatrix<C64>, String> {
    if repr.entries.len() != repr.dim * repr.dim {
        return Err(format!(
            "expected {} entries for dim {}, got {}",
            repr.dim * repr.dim,
            repr.dim,
            repr.entries.len()
        ));
    }
    Ok(DMatrix::from_fn(repr.dim, repr.dim, |i, j| {
        let e = repr.entries[i * repr.dim + j];
        C64::new(e[0], e[1])
    }))
}

impl Serialize for DensityMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_repr(&self.entries).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(deserializer)?;
        let m = matrix_from_repr(&repr).map_err(D::Error::custom)?;
        DensityMatrix::new(m).map_err(|e| D::Error::custom(e.to_string()))
    }
}

impl Serialize for Operator {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        matrix_to_repr(&self.entries).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Operator {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = MatrixRepr::deserialize(deserializer)?;
        let m = matrix_from_repr(&repr).map_err(D::Error::custom)?;
        Operator::new(m).map_err(|e| D::Error::custom(e.to_string()))
    }
}

impl Serialize for PureState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let amplitudes = self.amplitudes.iter().map(|z| [z.re, z.im]).collect();
        VectorRepr {
            dim: self.dim(),
            amplitudes,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PureState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = VectorRepr::deserialize(deserializer)?;
        if repr.amplitudes.len() != repr.dim {
            return Err(D::Error::custom(format!(
                "expected {} amplitudes, got {}",
                repr.dim,
                repr.amplitudes.len()
            )));
        }
        let v = DVector::from_iterator(repr.dim, repr.amplitudes.iter().map(|e| C64::new(e[0], e[1])));
        PureState::new(v).map_err(|e| D::Error::custom(e.to_string()))
    }
}
