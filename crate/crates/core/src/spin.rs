//! Multi-spin-1/2 operators and the spin-system description.
//!
//! Spin operators follow `I = sigma / 2` and are dimensionless; Hamiltonians
//! built from them are in rad/s. Site 0 is the slowest-varying tensor factor
//! of the computational basis, and basis state bit `n - 1 - k` set means spin
//! `k` is down (beta).

use crate::error::{Result, SpinError};
use crate::pauli::{i_pow, PauliBasis, PauliString};
use crate::sparse::CsrMatrix;
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use num_complex::Complex64;

/// Largest spin count accepted for Hilbert-space operators.
pub const MAX_SPINS: usize = 12;

/// Largest spin count accepted for Liouville-space superoperators.
pub const MAX_LIOUVILLE_SPINS: usize = 7;

/// Gyromagnetic ratio of 31P in rad s^-1 T^-1.
pub const GAMMA_31P: f64 = 1.08394e8;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// One molecule's 31P spin network.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinSystem {
    pub n_spins: usize,
    /// Nuclear positions in Angstrom.
    pub positions: Option<Vec<Vector3<f64>>>,
    /// Symmetric scalar couplings in Hz with zero diagonal.
    pub j_hz: Array2<f64>,
    /// Shielding tensors as absolute fractions (1 ppm = 1e-6).
    pub shielding: Option<Vec<Matrix3<f64>>>,
    pub tau_c_s: f64,
    pub b_field_t: f64,
    pub gamma_rad_s_t: f64,
    pub label: String,
    pub symmetry_label: String,
}

impl SpinSystem {
    /// A coupling-only system with default correlation time and field.
    pub fn from_couplings(j_hz: Array2<f64>) -> Result<Self> {
        let n = j_hz.nrows();
        SpinSystem {
            n_spins: n,
            positions: None,
            j_hz,
            shielding: None,
            tau_c_s: 177e-12,
            b_field_t: 50e-6,
            gamma_rad_s_t: GAMMA_31P,
            label: String::new(),
            symmetry_label: String::new(),
        }
        .validated()
    }

    pub fn with_positions(mut self, positions: Vec<Vector3<f64>>) -> Result<Self> {
        self.positions = Some(positions);
        self.validated()
    }

    pub fn with_shielding(mut self, tensors: Vec<Matrix3<f64>>) -> Result<Self> {
        self.shielding = Some(tensors);
        self.validated()
    }

    pub fn with_field(mut self, b_field_t: f64) -> Result<Self> {
        self.b_field_t = b_field_t;
        self.validated()
    }

    pub fn with_tau_c(mut self, tau_c_s: f64) -> Result<Self> {
        self.tau_c_s = tau_c_s;
        self.validated()
    }

    pub fn with_label(mut self, label: impl Into<String>, symmetry: impl Into<String>) -> Self {
        self.label = label.into();
        self.symmetry_label = symmetry.into();
        self
    }

    /// Checks every invariant and returns the system unchanged.
    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_spins;
        if !(2..=MAX_SPINS).contains(&n) {
            return Err(SpinError::InvalidSystem(format!("n_spins = {n}, expected 2..={MAX_SPINS}")));
        }
        if self.j_hz.dim() != (n, n) {
            return Err(SpinError::InvalidSystem(format!(
                "coupling matrix is {:?}, expected {n}x{n}",
                self.j_hz.dim()
            )));
        }
        for i in 0..n {
            if self.j_hz[[i, i]] != 0.0 {
                return Err(SpinError::InvalidSystem(format!("J[{i},{i}] must be zero")));
            }
            for j in 0..n {
                let (a, b) = (self.j_hz[[i, j]], self.j_hz[[j, i]]);
                if !a.is_finite() {
                    return Err(SpinError::InvalidSystem(format!("J[{i},{j}] is not finite")));
                }
                if (a - b).abs() > 1e-12 {
                    return Err(SpinError::InvalidSystem(format!("J[{i},{j}] = {a} differs from J[{j},{i}] = {b}")));
                }
            }
        }
        if let Some(pos) = &self.positions {
            if pos.len() != n {
                return Err(SpinError::InvalidSystem(format!("{} positions for {n} spins", pos.len())));
            }
            for i in 0..n {
                for j in i + 1..n {
                    if (pos[i] - pos[j]).norm() <= 0.0 {
                        return Err(SpinError::CoincidentNuclei(i, j));
                    }
                }
            }
        }
        if let Some(sh) = &self.shielding {
            if sh.len() != n {
                return Err(SpinError::InvalidSystem(format!("{} shielding tensors for {n} spins", sh.len())));
            }
        }
        if !(self.tau_c_s > 0.0) {
            return Err(SpinError::InvalidSystem(format!("tau_c = {} s must be positive", self.tau_c_s)));
        }
        if !(self.b_field_t >= 0.0) {
            return Err(SpinError::InvalidSystem(format!("B = {} T must be nonnegative", self.b_field_t)));
        }
        Ok(())
    }

    /// Isotropic part of each shielding tensor, zero when none are given.
    pub fn isotropic_shielding(&self) -> Vec<f64> {
        match &self.shielding {
            Some(t) => t.iter().map(|s| s.trace() / 3.0).collect(),
            None => vec![0.0; self.n_spins],
        }
    }

    /// Distinct unordered pairs `(j, k)` with `j < k`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        let n = self.n_spins;
        (0..n).flat_map(move |j| (j + 1..n).map(move |k| (j, k)))
    }
}

/// Operator on the `2^n`-dimensional Hilbert space of `n` spins.
#[derive(Clone, Debug, PartialEq)]
pub struct Operator {
    n_spins: usize,
    matrix: CsrMatrix<Complex64>,
}

fn check_spins(n: usize) -> Result<()> {
    if n == 0 || n > MAX_SPINS {
        Err(SpinError::SpinCount(n))
    } else {
        Ok(())
    }
}

fn check_site(n: usize, site: usize) -> Result<()> {
    if site >= n {
        Err(SpinError::SiteOutOfRange { site, n_spins: n })
    } else {
        Ok(())
    }
}

impl Operator {
    pub fn zeros(n_spins: usize) -> Self {
        let d = 1 << n_spins;
        Operator {
            n_spins,
            matrix: CsrMatrix::zeros(d, d),
        }
    }

    pub fn identity(n_spins: usize) -> Self {
        Operator {
            n_spins,
            matrix: CsrMatrix::identity(1 << n_spins),
        }
    }

    pub fn from_csr(matrix: CsrMatrix<Complex64>) -> Result<Self> {
        let d = matrix.nrows();
        if d != matrix.ncols() || !d.is_power_of_two() || d < 2 {
            return Err(SpinError::Dimension(format!(
                "operator must be square with power-of-two size, got {}x{}",
                d,
                matrix.ncols()
            )));
        }
        let n = d.trailing_zeros() as usize;
        check_spins(n)?;
        Ok(Operator { n_spins: n, matrix })
    }

    pub fn from_dense(dense: &Array2<Complex64>) -> Result<Self> {
        Self::from_csr(CsrMatrix::from_dense(dense))
    }

    /// Weighted sum of Pauli strings (the strings themselves, not `sigma / 2`).
    pub fn from_pauli_terms(n_spins: usize, terms: &[(PauliString, Complex64)]) -> Self {
        let d = 1usize << n_spins;
        let rows = (0..d).map(|r| {
            let mut row: Vec<(usize, Complex64)> = Vec::new();
            for &(s, w) in terms {
                let (c, v) = s.row_entry(r);
                match row.iter_mut().find(|(cc, _)| *cc == c) {
                    Some(e) => e.1 += w * v,
                    None => row.push((c, w * v)),
                }
            }
            row
        });
        Operator {
            n_spins,
            matrix: CsrMatrix::from_rows(d, rows),
        }
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        1 << self.n_spins
    }

    pub fn csr(&self) -> &CsrMatrix<Complex64> {
        &self.matrix
    }

    pub fn to_dense(&self) -> Array2<Complex64> {
        self.matrix.to_dense()
    }

    pub fn trace(&self) -> Complex64 {
        self.matrix.trace()
    }

    pub fn adjoint(&self) -> Self {
        Operator {
            n_spins: self.n_spins,
            matrix: self.matrix.adjoint(),
        }
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n_spins != other.n_spins {
            return Err(SpinError::Dimension(format!(
                "operators on {} and {} spins",
                self.n_spins, other.n_spins
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Operator {
            n_spins: self.n_spins,
            matrix: self.matrix.add(&other.matrix),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Operator {
            n_spins: self.n_spins,
            matrix: self.matrix.sub(&other.matrix),
        })
    }

    pub fn scale(&self, s: impl Into<Complex64>) -> Self {
        Operator {
            n_spins: self.n_spins,
            matrix: self.matrix.scale(s.into()),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Operator {
            n_spins: self.n_spins,
            matrix: self.matrix.matmul(&other.matrix),
        })
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.matmul(other)?.sub(&other.matmul(self)?)
    }

    /// Tensor product with `self` on the slower (lower-index) sites.
    pub fn kron(&self, other: &Self) -> Result<Self> {
        check_spins(self.n_spins + other.n_spins)?;
        Ok(Operator {
            n_spins: self.n_spins + other.n_spins,
            matrix: self.matrix.kron(&other.matrix),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.frobenius_norm()
    }

    /// Largest entrywise modulus of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.matrix.sub(&other.matrix).max_abs()
    }

    /// Relative anti-Hermitian residual `|A - A^dagger| / |A|`, zero for the zero operator.
    pub fn hermiticity_error(&self) -> f64 {
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        self.matrix.sub(&self.matrix.adjoint()).frobenius_norm() / norm
    }

    /// Expansion coefficients `Tr(P_k X) / sqrt(2^n)` in the orthonormal Pauli basis.
    pub fn to_pauli_vector(&self) -> Vec<Complex64> {
        let n = self.n_spins;
        let d = 1usize << n;
        let basis_norm = (d as f64).sqrt();
        let mut v = vec![ZERO; d * d];
        let basis = pauli_basis(n);
        for (i, j, val) in self.matrix.iter() {
            // X[i, j] pairs with P[j, i], nonzero only for strings with x = i ^ j
            let x = (i ^ j) as u32;
            for z in 0..d as u32 {
                let s = PauliString { x, z };
                let (c, p) = s.row_entry(j);
                debug_assert_eq!(c, i);
                v[basis.index(s)] += p * val;
            }
        }
        for e in v.iter_mut() {
            *e /= basis_norm;
        }
        v
    }

    pub fn from_pauli_vector(n_spins: usize, v: &[Complex64]) -> Result<Self> {
        check_spins(n_spins)?;
        let d = 1usize << n_spins;
        if v.len() != d * d {
            return Err(SpinError::Dimension(format!(
                "Pauli vector of length {} for {n_spins} spins",
                v.len()
            )));
        }
        let basis = pauli_basis(n_spins);
        let scale = 1.0 / (d as f64).sqrt();
        let mut dense = Array2::<Complex64>::zeros((d, d));
        for (k, &coef) in v.iter().enumerate() {
            if coef == ZERO {
                continue;
            }
            let s = basis.string(k);
            for r in 0..d {
                let (c, p) = s.row_entry(r);
                dense[[r, c]] += coef * p * scale;
            }
        }
        Self::from_dense(&dense)
    }
}

/// Superoperator on Liouville space, stored in the orthonormal Pauli basis
/// (see [`crate::pauli`]).
#[derive(Clone, Debug, PartialEq)]
pub struct SuperOperator {
    n_spins: usize,
    matrix: CsrMatrix<Complex64>,
    /// `S(X)^dagger = S(X^dagger)` for every `X`.
    pub hermiticity_preserving: bool,
    /// `Tr S(X) = 0` for every `X`.
    pub trace_annihilating: bool,
}

impl SuperOperator {
    pub fn new(
        n_spins: usize,
        matrix: CsrMatrix<Complex64>,
        hermiticity_preserving: bool,
        trace_annihilating: bool,
    ) -> Result<Self> {
        if n_spins == 0 || n_spins > MAX_LIOUVILLE_SPINS {
            return Err(SpinError::SpinCount(n_spins));
        }
        let d = 1usize << (2 * n_spins);
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(SpinError::Dimension(format!(
                "superoperator on {n_spins} spins must be {d}x{d}, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        Ok(SuperOperator {
            n_spins,
            matrix,
            hermiticity_preserving,
            trace_annihilating,
        })
    }

    pub fn zeros(n_spins: usize) -> Result<Self> {
        let d = 1usize << (2 * n_spins);
        Self::new(n_spins, CsrMatrix::zeros(d, d), true, true)
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn csr(&self) -> &CsrMatrix<Complex64> {
        &self.matrix
    }

    pub fn apply(&self, x: &Operator) -> Result<Operator> {
        if x.n_spins() != self.n_spins {
            return Err(SpinError::Dimension(format!(
                "superoperator on {} spins applied to operator on {}",
                self.n_spins,
                x.n_spins()
            )));
        }
        let v = self.matrix.matvec(&x.to_pauli_vector());
        Operator::from_pauli_vector(self.n_spins, &v)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrix.frobenius_norm()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.n_spins != other.n_spins {
            return Err(SpinError::Dimension("superoperators on different spin counts".into()));
        }
        Ok(SuperOperator {
            n_spins: self.n_spins,
            matrix: self.matrix.add(&other.matrix),
            hermiticity_preserving: self.hermiticity_preserving && other.hermiticity_preserving,
            trace_annihilating: self.trace_annihilating && other.trace_annihilating,
        })
    }

    pub fn scale(&self, s: Complex64) -> Self {
        SuperOperator {
            n_spins: self.n_spins,
            matrix: self.matrix.scale(s),
            hermiticity_preserving: self.hermiticity_preserving && s.im == 0.0,
            trace_annihilating: self.trace_annihilating,
        }
    }

    pub fn compose(&self, other: &Self) -> Result<Self> {
        if self.n_spins != other.n_spins {
            return Err(SpinError::Dimension("superoperators on different spin counts".into()));
        }
        Ok(SuperOperator {
            n_spins: self.n_spins,
            matrix: self.matrix.matmul(&other.matrix),
            hermiticity_preserving: self.hermiticity_preserving == other.hermiticity_preserving,
            trace_annihilating: self.trace_annihilating,
        })
    }
}

fn pauli_basis(n: usize) -> std::sync::Arc<PauliBasis> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<PauliBasis>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("basis cache poisoned");
    guard.entry(n).or_insert_with(|| Arc::new(PauliBasis::new(n))).clone()
}

pub(crate) fn shared_basis(n: usize) -> std::sync::Arc<PauliBasis> {
    pauli_basis(n)
}

/// `sigma_axis / 2` on `site`, identity elsewhere.
pub fn pauli_site_op(n_spins: usize, site: usize, axis: Axis) -> Result<Operator> {
    check_spins(n_spins)?;
    check_site(n_spins, site)?;
    let s = PauliString::single(n_spins, site, axis);
    Ok(Operator::from_pauli_terms(n_spins, &[(s, Complex64::new(0.5, 0.0))]))
}

/// `I_i . I_j`.
pub fn dot_coupling_op(n_spins: usize, i: usize, j: usize) -> Result<Operator> {
    check_spins(n_spins)?;
    check_site(n_spins, i)?;
    check_site(n_spins, j)?;
    if i == j {
        return Err(SpinError::SameSite(i));
    }
    let terms: Vec<_> = Axis::ALL
        .iter()
        .map(|&a| {
            let (_, s) = PauliString::single(n_spins, i, a).mul(PauliString::single(n_spins, j, a));
            (s, Complex64::new(0.25, 0.0))
        })
        .collect();
    Ok(Operator::from_pauli_terms(n_spins, &terms))
}

/// Sum of `I_{k,axis}` over all spins.
pub fn total_spin_op(n_spins: usize, axis: Axis) -> Result<Operator> {
    check_spins(n_spins)?;
    let terms: Vec<_> = (0..n_spins)
        .map(|k| (PauliString::single(n_spins, k, axis), Complex64::new(0.5, 0.0)))
        .collect();
    Ok(Operator::from_pauli_terms(n_spins, &terms))
}

/// Traces out every site not in `keep`. Kept sites retain their relative order.
pub fn partial_trace(op: &Operator, keep: &[usize]) -> Result<Operator> {
    let n = op.n_spins();
    if keep.is_empty() {
        return Err(SpinError::EmptyKeepSet);
    }
    let mut kept: Vec<usize> = keep.to_vec();
    kept.sort_unstable();
    kept.dedup();
    for &s in &kept {
        check_site(n, s)?;
    }
    let m = kept.len();
    let kept_bits: Vec<usize> = kept.iter().map(|&s| n - 1 - s).collect();
    let kept_mask: usize = kept_bits.iter().map(|&b| 1usize << b).sum();
    let compress = |b: usize| -> usize {
        kept_bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (pos, &bit)| acc | (((b >> bit) & 1) << (m - 1 - pos)))
    };
    let mut trip = Vec::new();
    for (r, c, v) in op.csr().iter() {
        if (r & !kept_mask) == (c & !kept_mask) {
            trip.push((compress(r), compress(c), v));
        }
    }
    let dm = 1usize << m;
    Operator::from_csr(CsrMatrix::from_triplets(dm, dm, trip))
}

/// `X -> [op, X]` as a superoperator.
pub fn commutator_superop(op: &Operator) -> Result<SuperOperator> {
    let n = op.n_spins();
    if n > MAX_LIOUVILLE_SPINS {
        return Err(SpinError::SpinCount(n));
    }
    let basis = pauli_basis(n);
    let d = 1usize << n;
    // op = sum_P h_P P with h_P = Tr(P op) / 2^n
    let h: Vec<(PauliString, Complex64)> = op
        .to_pauli_vector()
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c != ZERO)
        .map(|(k, c)| (basis.string(k), c / (d as f64).sqrt()))
        .collect();
    let matrix = commutator_matrix(&basis, &h);
    SuperOperator::new(n, matrix, false, true)
}

/// Matrix of `X -> [sum_P h_P P, X]` in the normalized Pauli basis.
pub(crate) fn commutator_matrix(basis: &PauliBasis, terms: &[(PauliString, Complex64)]) -> CsrMatrix<Complex64> {
    let dim = basis.dim();
    let mut trip = Vec::with_capacity(terms.len() * dim / 2);
    for (q_idx, &q) in basis.strings().iter().enumerate() {
        for &(p, hp) in terms {
            if p.commutes_with(q) {
                continue;
            }
            // [P, Q] = 2 P Q = 2 i^k R
            let (k, r) = p.mul(q);
            trip.push((basis.index(r), q_idx, hp * i_pow(k) * 2.0));
        }
    }
    CsrMatrix::from_triplets(dim, dim, trip)
}
