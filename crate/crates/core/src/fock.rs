//! Truncated Fock-space algebra: ladder operators, the rotating-frame
//! Hamiltonian, coherent states and Weyl-ordered moments.
//!
//! All operators are dense `N x N` complex matrices over the levels
//! |0⟩ … |N-1⟩.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Default truncation.
pub const DEFAULT_DIM: usize = 40;

/// Default bound on the population of the top 10% of levels.
pub const DEFAULT_TRUNCATION_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FockOperator(CMatrix);

impl FockOperator {
    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.nrows() < 2 {
            return Err(Error::invalid("dim", "must be >= 2"));
        }
        if m.iter().any(|z| !z.is_finite()) {
            return Err(Error::invalid("entries", "must be finite"));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    /// Largest entry-wise deviation from Hermiticity.
    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.0)
    }
}

pub(crate) fn hermiticity_error(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

fn check_dim(dim: usize, min: usize) -> Result<()> {
    if dim < min {
        return Err(Error::invalid("dim", format!("must be >= {min}")));
    }
    Ok(())
}

/// Annihilation operator with ⟨n-1|a|n⟩ = √n.
pub fn annihilation(dim: usize) -> Result<FockOperator> {
    check_dim(dim, 2)?;
    let mut m = CMatrix::zeros(dim, dim);
    for n in 1..dim {
        m[(n - 1, n)] = Complex64::new((n as f64).sqrt(), 0.0);
    }
    Ok(FockOperator(m))
}

pub fn creation(dim: usize) -> Result<FockOperator> {
    Ok(annihilation(dim)?.adjoint())
}

/// a†a = diag(0, 1, …, N-1).
pub fn number(dim: usize) -> Result<FockOperator> {
    check_dim(dim, 2)?;
    Ok(FockOperator(CMatrix::from_diagonal(&nalgebra::DVector::from_fn(dim, |n, _| {
        Complex64::new(n as f64, 0.0)
    }))))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumParams {
    /// Detuning Δ = ω0 - ω in the frame rotating with the drive.
    pub delta: f64,
    /// One-phonon gain rate.
    pub kappa1: f64,
    /// Two-phonon loss rate.
    pub kappa2: f64,
    /// Fock-space truncation N.
    #[serde(default = "default_dim")]
    pub dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl QuantumParams {
    /// (κ1, κ2) = (1, 0.05), Δ = 2π × 0.05.
    pub fn weak() -> Self {
        Self {
            delta: std::f64::consts::TAU * 0.05,
            kappa1: 1.0,
            kappa2: 0.05,
            dim: DEFAULT_DIM,
        }
    }

    /// (κ1, κ2) = (0.05, 1), Δ = 2π × 0.05.
    pub fn strong() -> Self {
        Self {
            kappa1: 0.05,
            kappa2: 1.0,
            ..Self::weak()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.delta.is_finite() {
            return Err(Error::invalid("delta", "must be finite"));
        }
        if !(self.kappa1 >= 0.0) || !self.kappa1.is_finite() {
            return Err(Error::invalid("kappa1", "must be >= 0"));
        }
        if !(self.kappa2 >= 0.0) || !self.kappa2.is_finite() {
            return Err(Error::invalid("kappa2", "must be >= 0"));
        }
        check_dim(self.dim, 3)
    }

    /// κ1/2κ2 + 1, the quoted estimate of the stationary phonon number.
    pub fn phonon_estimate(&self) -> f64 {
        self.kappa1 / (2.0 * self.kappa2) + 1.0
    }
}

/// H = Δ a†a + (ε1/2)(a + a†) + (iε2/2)(a - a†).
pub fn hamiltonian(p: &QuantumParams, eps1: f64, eps2: f64) -> Result<FockOperator> {
    let n = p.dim;
    check_dim(n, 2)?;
    let mut m = CMatrix::zeros(n, n);
    let upper = Complex64::new(eps1, eps2) * 0.5;
    for k in 0..n {
        m[(k, k)] = Complex64::new(p.delta * k as f64, 0.0);
        if k + 1 < n {
            let s = ((k + 1) as f64).sqrt();
            m[(k, k + 1)] = upper * s;
            m[(k + 1, k)] = upper.conj() * s;
        }
    }
    Ok(FockOperator(m))
}

/// Symmetrically ordered S[a²a†] = (a²a† + a a† a + a† a²)/3.
pub fn weyl_third_moment_operator(dim: usize) -> Result<FockOperator> {
    check_dim(dim, 3)?;
    let a = annihilation(dim)?.into_matrix();
    let ad = a.adjoint();
    let a2 = &a * &a;
    let sum = &a2 * &ad + &a * &ad * &a + &ad * &a2;
    Ok(FockOperator(sum.map(|z| z / 3.0)))
}

/// A unit-trace Hermitian positive state in the truncated Fock basis.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(CMatrix);

/// Summary of the checks applied by [`DensityMatrix::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateDiagnostics {
    pub hermiticity_error: f64,
    pub trace_error: f64,
    pub min_eigenvalue: f64,
    pub top_population: f64,
}

impl DensityMatrix {
    /// Wraps a matrix without checks; see [`DensityMatrix::validate`].
    pub fn from_matrix_unchecked(m: CMatrix) -> Self {
        Self(m)
    }

    pub fn from_matrix(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let rho = Self(m);
        rho.validate(DEFAULT_TRUNCATION_THRESHOLD)?;
        Ok(rho)
    }

    pub fn vacuum(dim: usize) -> Result<Self> {
        Self::fock_state(0, dim)
    }

    pub fn fock_state(n: usize, dim: usize) -> Result<Self> {
        check_dim(dim, 2)?;
        if n >= dim {
            return Err(Error::invalid("n", format!("level {n} outside truncation {dim}")));
        }
        let mut m = CMatrix::zeros(dim, dim);
        m[(n, n)] = Complex64::new(1.0, 0.0);
        Ok(Self(m))
    }

    /// Diagonal state with the given populations (normalized).
    pub fn from_populations(pops: &[f64]) -> Result<Self> {
        check_dim(pops.len(), 2)?;
        let total: f64 = pops.iter().sum();
        if !(total > 0.0) || pops.iter().any(|p| *p < 0.0) {
            return Err(Error::invalid("populations", "must be non-negative with positive sum"));
        }
        let diag = nalgebra::DVector::from_iterator(pops.len(), pops.iter().map(|p| Complex64::new(p / total, 0.0)));
        Ok(Self(CMatrix::from_diagonal(&diag)))
    }

    /// |ψ⟩⟨ψ| for a normalized amplitude vector.
    pub fn pure(amplitudes: &[Complex64]) -> Result<Self> {
        check_dim(amplitudes.len(), 2)?;
        let norm: f64 = amplitudes.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::invalid("amplitudes", "zero vector"));
        }
        let v = nalgebra::DVector::from_iterator(amplitudes.len(), amplitudes.iter().map(|c| c / norm));
        Ok(Self(&v * v.adjoint()))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn matrix_mut(&mut self) -> &mut CMatrix {
        &mut self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    /// Tr[ρ O].
    pub fn expectation(&self, op: &FockOperator) -> Complex64 {
        trace_product(&self.0, op.matrix())
    }

    pub fn purity(&self) -> f64 {
        trace_product(&self.0, &self.0).re
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let h = hermitian_part(&self.0);
        SymmetricEigen::new(h).eigenvalues.iter().copied().collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Population of the top ⌈N/10⌉ levels.
    pub fn top_population(&self) -> f64 {
        let n = self.dim();
        let band = n.div_ceil(10).max(1);
        (n - band..n).map(|k| self.0[(k, k)].re).sum()
    }

    pub fn diagnostics(&self) -> StateDiagnostics {
        StateDiagnostics {
            hermiticity_error: hermiticity_error(&self.0),
            trace_error: (self.trace() - Complex64::new(1.0, 0.0)).norm(),
            min_eigenvalue: self.min_eigenvalue(),
            top_population: self.top_population(),
        }
    }

    /// Checks Hermiticity (1e-10), unit trace (1e-8), positivity (-1e-8)
    /// and the truncation guard.
    pub fn validate(&self, truncation_threshold: f64) -> Result<StateDiagnostics> {
        let d = self.diagnostics();
        if !(d.hermiticity_error <= 1e-10) {
            return Err(Error::invalid("rho", format!("not Hermitian (deviation {:e})", d.hermiticity_error)));
        }
        if !(d.trace_error <= 1e-8) {
            return Err(Error::invalid("rho", format!("trace deviates from 1 by {:e}", d.trace_error)));
        }
        if d.min_eigenvalue < -1e-8 {
            return Err(Error::PositivityLoss {
                t: f64::NAN,
                min_eigenvalue: d.min_eigenvalue,
            });
        }
        if d.top_population > truncation_threshold {
            return Err(Error::TruncationOverflow {
                t: f64::NAN,
                population: d.top_population,
                threshold: truncation_threshold,
            });
        }
        Ok(d)
    }
}

/// Tr[A B] without forming the product.
pub(crate) fn trace_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub(crate) fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).map(|z| z * 0.5)
}

/// Norm correction above which a truncated coherent state is rejected.
pub const COHERENT_TRUNCATION_TOL: f64 = 1e-6;

/// |α0⟩⟨α0| from e^{-|α0|²/2} α0ⁿ/√(n!), renormalized after truncation.
pub fn coherent_state(alpha0: Complex64, dim: usize) -> Result<DensityMatrix> {
    check_dim(dim, 2)?;
    if alpha0.norm_sqr() > dim as f64 / 4.0 {
        warn!("|alpha0|^2 = {} is large for truncation {dim}", alpha0.norm_sqr());
    }
    let amps = coherent_amplitudes(alpha0, dim);
    let norm_sqr: f64 = amps.iter().map(|c| c.norm_sqr()).sum();
    let correction = 1.0 - norm_sqr;
    if correction > COHERENT_TRUNCATION_TOL {
        return Err(Error::TruncationTooSmall { correction });
    }
    DensityMatrix::pure(&amps)
}

fn coherent_amplitudes(alpha0: Complex64, dim: usize) -> Vec<Complex64> {
    let mut amps = Vec::with_capacity(dim);
    let mut c = Complex64::new((-alpha0.norm_sqr() / 2.0).exp(), 0.0);
    for n in 0..dim {
        amps.push(c);
        c = c * alpha0 / ((n + 1) as f64).sqrt();
    }
    amps
}

/// Mean amplitude, Weyl-ordered third moment and phonon number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    /// ⟨α⟩ = Tr[ρ a].
    pub mean: Complex64,
    /// ⟨|α|²α⟩ = Tr[ρ S[a²a†]]; real part ⟨|α|²x⟩, imaginary ⟨|α|²y⟩.
    pub third: Complex64,
    /// ⟨a†a⟩.
    pub phonon: f64,
}

/// Precomputed operators for repeated moment evaluation at one truncation.
#[derive(Debug, Clone)]
pub struct MomentOperators {
    a: FockOperator,
    weyl: FockOperator,
}

impl MomentOperators {
    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            a: annihilation(dim)?,
            weyl: weyl_third_moment_operator(dim)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    pub fn evaluate(&self, rho: &DensityMatrix) -> MomentSet {
        let m = rho.matrix();
        let n = m.nrows();
        let phonon = (0..n).map(|k| k as f64 * m[(k, k)].re).sum();
        MomentSet {
            mean: rho.expectation(&self.a),
            third: rho.expectation(&self.weyl),
            phonon,
        }
    }
}

pub fn moments(rho: &DensityMatrix) -> Result<MomentSet> {
    Ok(MomentOperators::new(rho.dim())?.evaluate(rho))
}

/// JSON form: `{"dim": N, "entries": [[re, im], ...]}` in row-major order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DensityMatrixJson {
    dim: usize,
    entries: Vec<[f64; 2]>,
}

impl Serialize for DensityMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let n = self.dim();
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let z = self.0[(i, j)];
                entries.push([z.re, z.im]);
            }
        }
        DensityMatrixJson { dim: n, entries }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = DensityMatrixJson::deserialize(d)?;
        if raw.entries.len() != raw.dim * raw.dim {
            return Err(serde::de::Error::custom(format!(
                "expected {} entries for dim {}, got {}",
                raw.dim * raw.dim,
                raw.dim,
                raw.entries.len()
            )));
        }
        let m = CMatrix::from_row_iterator(
            raw.dim,
            raw.dim,
            raw.entries.iter().map(|[re, im]| Complex64::new(*re, *im)),
        );
        Ok(Self(m))
    }
}
