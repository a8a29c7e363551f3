//! Liouville-space propagation, single-molecule correlation tensors, and
//! joint two-molecule singlet probabilities.
//!
//! Superoperators act in the orthonormal Pauli basis, where the real generator
//! `G = -i L = -i C(H0) + Gamma` evolves vectorized operators as `x(t) = exp(G t) x0`.

use crate::error::{Result, SpinError};
use crate::hamiltonian::{coherent_terms, coupling_terms, larmor_frequencies, terms_to_operator, zeeman_terms, PauliTerms};
use crate::krylov::{expm_multiply, DEFAULT_KRYLOV_DIM};
use crate::linalg::eigh_hermitian;
use crate::observables::singlet_projector;
use crate::pauli::{i_pow, PauliString};
use crate::relaxation::{orientation_grid, relaxation_superop, GridKind, Mechanism, ICOSAHEDRAL_ORDER};
use crate::sparse::CsrMatrix;
use crate::spin::{commutator_superop, partial_trace, shared_basis, Axis, Operator, SpinSystem, SuperOperator};
use nalgebra::Matrix3;
use ndarray::{Array1, Array2, OwnedRepr};
use ndarray_linalg::{Eig, Eigh, Factorize, LUFactorized, ReciprocalConditionNum, Solve, UPLO};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Largest eigenvector condition number accepted by the spectral path.
pub const MAX_EIGVEC_CONDITION: f64 = 1e12;
/// Largest imaginary part tolerated in a correlation tensor.
pub const IMAG_TOL: f64 = 1e-10;
/// Default cap on the total spin count of the direct joint evolution.
pub const DEFAULT_ORACLE_CAP: usize = 6;

// ---------------------------------------------------------------------------
// Time grids

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum GridScheme {
    Linear { end: f64, steps: usize },
    Piecewise { split: f64, fine_step: f64, end: f64, coarse_step: f64 },
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TimeGrid {
    points: Vec<f64>,
    scheme: GridScheme,
}

fn step_count(span: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) || !(span >= 0.0) {
        return Err(SpinError::InvalidArgument(format!("bad grid span {span} / step {step}")));
    }
    let n = (span / step).round();
    if (n * step - span).abs() > 1e-9 * span.max(step) {
        return Err(SpinError::InvalidArgument(format!("step {step} does not divide span {span}")));
    }
    Ok(n as usize)
}

impl TimeGrid {
    /// `steps + 1` equally spaced points on `[0, end]`.
    pub fn linear(end: f64, steps: usize) -> Result<Self> {
        if !(end > 0.0) || steps == 0 {
            return Err(SpinError::InvalidArgument(format!("linear grid needs end > 0 and steps > 0, got {end}, {steps}")));
        }
        let points = (0..=steps).map(|i| end * i as f64 / steps as f64).collect();
        Ok(TimeGrid {
            points,
            scheme: GridScheme::Linear { end, steps },
        })
    }

    /// `fine_step` spacing up to `split`, then `coarse_step` spacing up to `end`.
    pub fn piecewise(split: f64, fine_step: f64, end: f64, coarse_step: f64) -> Result<Self> {
        if !(split > 0.0 && end > split) {
            return Err(SpinError::InvalidArgument(format!("piecewise grid needs 0 < split < end, got {split}, {end}")));
        }
        let n1 = step_count(split, fine_step)?;
        let n2 = step_count(end - split, coarse_step)?;
        let mut points: Vec<f64> = (0..n1).map(|i| i as f64 * fine_step).collect();
        points.extend((0..=n2).map(|k| split + k as f64 * coarse_step));
        Ok(TimeGrid {
            points,
            scheme: GridScheme::Piecewise {
                split,
                fine_step,
                end,
                coarse_step,
            },
        })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.first() != Some(&0.0) {
            return Err(SpinError::InvalidArgument("time grid must start at 0".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || points.iter().any(|t| !t.is_finite()) {
            return Err(SpinError::InvalidArgument("time grid must be strictly increasing and finite".into()));
        }
        Ok(TimeGrid {
            points,
            scheme: GridScheme::Explicit,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn scheme(&self) -> &GridScheme {
        &self.scheme
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn end(&self) -> f64 {
        *self.points.last().unwrap_or(&0.0)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase", deny_unknown_fields)]
enum GridRepr {
    Linear { end: f64, steps: usize },
    Piecewise { split: f64, fine_step: f64, end: f64, coarse_step: f64 },
    Explicit { points: Vec<f64> },
}

impl From<TimeGrid> for GridRepr {
    fn from(g: TimeGrid) -> Self {
        match g.scheme {
            GridScheme::Linear { end, steps } => GridRepr::Linear { end, steps },
            GridScheme::Piecewise {
                split,
                fine_step,
                end,
                coarse_step,
            } => GridRepr::Piecewise {
                split,
                fine_step,
                end,
                coarse_step,
            },
            GridScheme::Explicit => GridRepr::Explicit { points: g.points },
        }
    }
}

impl TryFrom<GridRepr> for TimeGrid {
    type Error = SpinError;
    fn try_from(r: GridRepr) -> Result<Self> {
        match r {
            GridRepr::Linear { end, steps } => TimeGrid::linear(end, steps),
            GridRepr::Piecewise {
                split,
                fine_step,
                end,
                coarse_step,
            } => TimeGrid::piecewise(split, fine_step, end, coarse_step),
            GridRepr::Explicit { points } => TimeGrid::from_points(points),
        }
    }
}

impl Default for TimeGrid {
    /// 0 to 2 s at 1 ms, then 2 to 1000 s at 50 ms.
    fn default() -> Self {
        TimeGrid::piecewise(2.0, 1e-3, 1000.0, 0.05).expect("valid default grid")
    }
}

impl fmt::Display for TimeGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.scheme {
            GridScheme::Linear { end, steps } => write!(f, "linear:{end}:{steps}"),
            GridScheme::Piecewise {
                split,
                fine_step,
                end,
                coarse_step,
            } => write!(f, "piecewise:{split}:{fine_step}:{end}:{coarse_step}"),
            GridScheme::Explicit => write!(f, "explicit:{}", self.points.len()),
        }
    }
}

impl FromStr for TimeGrid {
    type Err = SpinError;

    /// Parses `linear:END:STEPS` or `piecewise:SPLIT:FINE:END:COARSE`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| SpinError::InvalidArgument(format!("bad number `{x}` in grid `{s}`")))
        };
        match parts.as_slice() {
            ["linear", end, steps] => {
                let steps = steps
                    .trim()
                    .parse()
                    .map_err(|_| SpinError::InvalidArgument(format!("bad step count in grid `{s}`")))?;
                TimeGrid::linear(num(end)?, steps)
            }
            ["piecewise", split, fine, end, coarse] => TimeGrid::piecewise(num(split)?, num(fine)?, num(end)?, num(coarse)?),
            _ => Err(SpinError::InvalidArgument(format!(
                "grid `{s}` is not `linear:END:STEPS` or `piecewise:SPLIT:FINE:END:COARSE`"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Liouvillian and propagation

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagationMethod {
    Eigendecomposition,
    KrylovExpm,
}

impl FromStr for PropagationMethod {
    type Err = SpinError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eig" | "eigendecomposition" => Ok(PropagationMethod::Eigendecomposition),
            "krylov" | "krylov-expm" => Ok(PropagationMethod::KrylovExpm),
            other => Err(SpinError::InvalidArgument(format!("unknown propagation method `{other}`"))),
        }
    }
}

/// `L = C(H0) + i Gamma`, with `d rho / dt = -i L rho`.
#[derive(Clone, Debug)]
pub struct Liouvillian {
    coherent: SuperOperator,
    relaxation: Option<SuperOperator>,
    generator: CsrMatrix<f64>,
}

fn real_generator(l: &CsrMatrix<Complex64>) -> Result<CsrMatrix<f64>> {
    let g = l.scale(Complex64::new(0.0, -1.0));
    let imag = g.max_imag();
    if imag > 1e-12 * g.max_abs().max(f64::MIN_POSITIVE) {
        return Err(SpinError::Numerical(format!("generator has imaginary entries up to {imag:e}")));
    }
    Ok(g.real_part())
}

pub fn build_liouvillian(h0: &Operator, gamma: Option<&SuperOperator>) -> Result<Liouvillian> {
    let coherent = commutator_superop(h0)?;
    if let Some(g) = gamma {
        if g.n_spins() != h0.n_spins() {
            return Err(SpinError::Dimension(format!(
                "Hamiltonian on {} spins, relaxation superoperator on {}",
                h0.n_spins(),
                g.n_spins()
            )));
        }
    }
    let l = match gamma {
        Some(g) => coherent.csr().add(&g.csr().scale(Complex64::i())),
        None => coherent.csr().clone(),
    };
    Ok(Liouvillian {
        generator: real_generator(&l)?,
        coherent,
        relaxation: gamma.cloned(),
    })
}

impl Liouvillian {
    pub fn n_spins(&self) -> usize {
        self.coherent.n_spins()
    }

    pub fn coherent(&self) -> &SuperOperator {
        &self.coherent
    }

    pub fn relaxation(&self) -> Option<&SuperOperator> {
        self.relaxation.as_ref()
    }

    /// The complex matrix of `L` in the Pauli basis.
    pub fn matrix(&self) -> CsrMatrix<Complex64> {
        self.generator.map(|v| Complex64::new(0.0, v))
    }

    /// The real generator `-i L`.
    pub fn generator(&self) -> &CsrMatrix<f64> {
        &self.generator
    }

    pub fn apply(&self, x: &Operator) -> Result<Operator> {
        let v = self.matrix().matvec(&x.to_pauli_vector());
        Operator::from_pauli_vector(self.n_spins(), &v)
    }
}

/// Eigendecomposition of a real generator with an LU factorization of its eigenvectors.
struct Spectral {
    values: Array1<Complex64>,
    vectors: Array2<Complex64>,
    lu: LUFactorized<OwnedRepr<Complex64>>,
}

impl Spectral {
    /// `None` when the eigenvector matrix is too ill-conditioned.
    fn new(g: &CsrMatrix<f64>) -> Result<Option<Spectral>> {
        let (values, vectors) = g.to_dense().eig()?;
        let lu = vectors.factorize()?;
        let rcond = lu.rcond()?;
        if !(rcond > 0.0) || 1.0 / rcond > MAX_EIGVEC_CONDITION {
            log::warn!(
                "eigenvector condition estimate {:.3e} exceeds {:.0e}; using Krylov propagation",
                1.0 / rcond,
                MAX_EIGVEC_CONDITION
            );
            return Ok(None);
        }
        Ok(Some(Spectral { values, vectors, lu }))
    }

    fn coefficients(&self, x0: &[Complex64]) -> Result<Array1<Complex64>> {
        Ok(self.lu.solve(&Array1::from(x0.to_vec()))?)
    }
}

fn krylov_complex(g: &CsrMatrix<f64>, x0: &[Complex64], times: &[f64], tol: f64) -> Result<Vec<Vec<Complex64>>> {
    let re: Vec<f64> = x0.iter().map(|c| c.re).collect();
    let im: Vec<f64> = x0.iter().map(|c| c.im).collect();
    let mut out = Vec::with_capacity(times.len());
    let (mut cur_re, mut cur_im) = (re, im);
    let mut t_prev = 0.0;
    for &t in times {
        let dt = t - t_prev;
        if dt > 0.0 {
            cur_re = expm_multiply(g, &cur_re, dt, tol, DEFAULT_KRYLOV_DIM)?.0;
            cur_im = expm_multiply(g, &cur_im, dt, tol, DEFAULT_KRYLOV_DIM)?.0;
        }
        out.push(cur_re.iter().zip(&cur_im).map(|(&a, &b)| Complex64::new(a, b)).collect());
        t_prev = t;
    }
    Ok(out)
}

/// `x(t) = exp(-i L t) x0` on every grid point.
///
/// The eigendecomposition path falls back to Krylov stepping when the
/// eigenvector matrix is ill-conditioned.
pub fn propagate(l: &Liouvillian, x0: &Operator, grid: &TimeGrid, method: PropagationMethod, tol: f64) -> Result<Vec<Operator>> {
    if x0.n_spins() != l.n_spins() {
        return Err(SpinError::Dimension(format!(
            "operator on {} spins, Liouvillian on {}",
            x0.n_spins(),
            l.n_spins()
        )));
    }
    let v0 = x0.to_pauli_vector();
    let n = l.n_spins();
    let spectral = match method {
        PropagationMethod::Eigendecomposition => Spectral::new(l.generator())?,
        PropagationMethod::KrylovExpm => None,
    };
    let vectors: Vec<Vec<Complex64>> = match spectral {
        Some(sp) => {
            let c = sp.coefficients(&v0)?;
            grid.points()
                .iter()
                .map(|&t| {
                    let scaled: Array1<Complex64> = c.iter().zip(sp.values.iter()).map(|(ci, li)| ci * (li * t).exp()).collect();
                    sp.vectors.dot(&scaled).to_vec()
                })
                .collect()
        }
        None => krylov_complex(l.generator(), &v0, grid.points(), tol)?,
    };
    vectors.iter().map(|v| Operator::from_pauli_vector(n, v)).collect()
}

// ---------------------------------------------------------------------------
// Single-molecule correlation tensors

/// `m_ab(t) = 2^-n Tr[sigma_{probe,b} exp(-i L t)(sigma_{source,a})]`, row `a` is the source axis.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTensor {
    pub times: Vec<f64>,
    pub m: Vec<Matrix3<f64>>,
    pub source: usize,
    pub probe: usize,
}

impl CorrelationTensor {
    /// Largest singular value over all samples.
    pub fn max_singular_value(&self) -> f64 {
        self.m
            .iter()
            .map(|m| m.singular_values().max())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsOptions {
    pub relaxation: bool,
    pub mechanisms: Vec<Mechanism>,
    pub orientation_kind: GridKind,
    pub orientation_count: usize,
    pub orientation_seed: u64,
    pub method: PropagationMethod,
    /// Use each spin's own isotropic shielding in the Zeeman term.
    pub per_site_shielding: bool,
    /// Remove a uniform Zeeman precession analytically when it commutes with the rest.
    pub zeeman_frame: bool,
    pub krylov_tol: f64,
}

impl Default for DynamicsOptions {
    fn default() -> Self {
        DynamicsOptions {
            relaxation: false,
            mechanisms: vec![Mechanism::Dipolar],
            orientation_kind: GridKind::SphericalDesign,
            orientation_count: ICOSAHEDRAL_ORDER,
            orientation_seed: 0,
            method: PropagationMethod::Eigendecomposition,
            per_site_shielding: false,
            zeeman_frame: true,
            krylov_tol: 1e-10,
        }
    }
}

impl DynamicsOptions {
    pub fn coherent() -> Self {
        Self::default()
    }

    pub fn with_relaxation(mechanisms: &[Mechanism]) -> Self {
        DynamicsOptions {
            relaxation: true,
            mechanisms: mechanisms.to_vec(),
            ..Self::default()
        }
    }
}

/// Real generator `-i C(H)` for a Hamiltonian given as Pauli terms.
pub fn coherent_generator(n_spins: usize, terms: &PauliTerms) -> CsrMatrix<f64> {
    let basis = shared_basis(n_spins);
    let dim = basis.dim();
    let mut trip = Vec::new();
    for (q_idx, &q) in basis.strings().iter().enumerate() {
        for &(p, h) in terms {
            if p.commutes_with(q) {
                continue;
            }
            let (k, r) = p.mul(q);
            // -i * 2 h i^k with k odd is real
            let v = (Complex64::new(0.0, -2.0 * h) * i_pow(k)).re;
            trip.push((basis.index(r), q_idx, v));
        }
    }
    CsrMatrix::from_triplets(dim, dim, trip)
}

fn relative_commutator(a: &CsrMatrix<f64>, b: &CsrMatrix<f64>) -> f64 {
    let ab = a.matmul(b);
    let ba = b.matmul(a);
    let diff = ab.add(&ba.scale(-1.0)).frobenius_norm();
    let scale = a.frobenius_norm() * b.frobenius_norm();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

enum Engine {
    Hilbert { energies: Array1<f64>, vectors: Array2<f64> },
    Spectral(Spectral),
    Krylov(CsrMatrix<f64>),
}

/// One molecule's propagator, built once and reused for every correlation tensor.
pub struct MoleculeModel {
    n_spins: usize,
    engine: Engine,
    /// Larmor frequency removed into a rotating frame, if any.
    frame_omega: Option<f64>,
    krylov_tol: f64,
}

impl MoleculeModel {
    pub fn new(system: &SpinSystem, opts: &DynamicsOptions) -> Result<Self> {
        system.validate()?;
        let n = system.n_spins;
        let omegas = larmor_frequencies(system, opts.per_site_shielding);
        let uniform = omegas.iter().all(|&w| w == omegas[0]);
        let mut frame_omega = (opts.zeeman_frame && uniform && omegas[0] != 0.0).then_some(omegas[0]);
        let h_terms = |framed: bool| {
            if framed {
                coupling_terms(system)
            } else {
                coherent_terms(system, opts.per_site_shielding)
            }
        };

        if !opts.relaxation && opts.method == PropagationMethod::Eigendecomposition {
            let h = terms_to_operator(n, &h_terms(frame_omega.is_some())).to_dense();
            let real = h.mapv(|v| v.re);
            debug_assert!(h.iter().all(|v| v.im == 0.0));
            let (energies, vectors) = real.eigh(UPLO::Lower)?;
            return Ok(MoleculeModel {
                n_spins: n,
                engine: Engine::Hilbert { energies, vectors },
                frame_omega,
                krylov_tol: opts.krylov_tol,
            });
        }

        let gamma = if opts.relaxation {
            let grid = orientation_grid(opts.orientation_kind, opts.orientation_count, opts.orientation_seed)?;
            Some(relaxation_superop(system, &opts.mechanisms, &grid)?.csr().real_part())
        } else {
            None
        };
        let mut generator = coherent_generator(n, &h_terms(frame_omega.is_some()));
        if let Some(g) = &gamma {
            generator = generator.add(g);
        }
        if let Some(w) = frame_omega {
            let zeeman = coherent_generator(n, &zeeman_terms(system, false));
            let rel = relative_commutator(&generator, &zeeman);
            if rel > 1e-10 {
                log::debug!("Zeeman term does not commute with the rest (relative {rel:e}); propagating it directly");
                generator = generator.add(&zeeman);
                frame_omega = None;
            } else {
                debug_assert!(w != 0.0);
            }
        }
        let engine = match opts.method {
            PropagationMethod::Eigendecomposition => match Spectral::new(&generator)? {
                Some(s) => Engine::Spectral(s),
                None => Engine::Krylov(generator),
            },
            PropagationMethod::KrylovExpm => Engine::Krylov(generator),
        };
        Ok(MoleculeModel {
            n_spins: n,
            engine,
            frame_omega,
            krylov_tol: opts.krylov_tol,
        })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn uses_zeeman_frame(&self) -> bool {
        self.frame_omega.is_some()
    }

    pub fn correlation_tensor(&self, source: usize, probe: usize, grid: &TimeGrid) -> Result<CorrelationTensor> {
        Ok(self.correlation_tensors(&[(source, probe)], grid)?.remove(0))
    }

    /// Correlation tensors for several `(source, probe)` pairs sharing one time grid.
    pub fn correlation_tensors(&self, pairs: &[(usize, usize)], grid: &TimeGrid) -> Result<Vec<CorrelationTensor>> {
        for &(s, p) in pairs {
            for site in [s, p] {
                if site >= self.n_spins {
                    return Err(SpinError::SiteOutOfRange {
                        site,
                        n_spins: self.n_spins,
                    });
                }
            }
        }
        let times = grid.points();
        let mut ms = match &self.engine {
            Engine::Hilbert { energies, vectors } => hilbert_tensors(self.n_spins, energies, vectors, pairs, times),
            Engine::Spectral(sp) => spectral_tensors(self.n_spins, sp, pairs, times)?,
            Engine::Krylov(g) => krylov_tensors(self.n_spins, g, pairs, times, self.krylov_tol)?,
        };
        if let Some(w) = self.frame_omega {
            for series in ms.iter_mut() {
                for (m, &t) in series.iter_mut().zip(times) {
                    *m *= zeeman_rotation(w * t).transpose();
                }
            }
        }
        Ok(pairs
            .iter()
            .zip(ms)
            .map(|(&(source, probe), m)| CorrelationTensor {
                times: times.to_vec(),
                m,
                source,
                probe,
            })
            .collect())
    }
}

/// Coefficients of `exp(i theta Fz) sigma_b exp(-i theta Fz)` on `sigma_c`, row `b`.
fn zeeman_rotation(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `V^T sigma V` for one site and axis, returned as a real matrix and whether it carries a factor `i`.
fn rotated_pauli(n: usize, site: usize, axis: Axis, v: &Array2<f64>) -> (Array2<f64>, bool) {
    let s = PauliString::single(n, site, axis);
    let d = v.nrows();
    let imaginary = axis == Axis::Y;
    let mut sv = Array2::<f64>::zeros((d, d));
    for r in 0..d {
        let (c, val) = s.row_entry(r);
        let f = if imaginary { val.im } else { val.re };
        sv.row_mut(r).assign(&(&v.row(c) * f));
    }
    (v.t().dot(&sv), imaginary)
}

fn hilbert_tensors(
    n: usize,
    energies: &Array1<f64>,
    vectors: &Array2<f64>,
    pairs: &[(usize, usize)],
    times: &[f64],
) -> Vec<Vec<Matrix3<f64>>> {
    let d = energies.len();
    let mut rotated: std::collections::BTreeMap<(usize, usize), (Array2<f64>, bool)> = Default::default();
    for &(s, p) in pairs {
        for site in [s, p] {
            for axis in Axis::ALL {
                rotated
                    .entry((site, axis.index()))
                    .or_insert_with(|| rotated_pauli(n, site, axis, vectors));
            }
        }
    }
    let mut freqs: Vec<f64> = Vec::with_capacity(d * (d - 1) / 2);
    for a in 0..d {
        for b in a + 1..d {
            freqs.push(energies[a] - energies[b]);
        }
    }
    struct PairPlan {
        constant: [f64; 9],
        idx: Vec<u32>,
        weights: Vec<[Complex64; 9]>,
    }
    let norm = 1.0 / d as f64;
    let plans: Vec<PairPlan> = pairs
        .iter()
        .map(|&(s, p)| {
            let mut constant = [0.0; 9];
            let mut idx = Vec::new();
            let mut weights = Vec::new();
            let mut k = 0u32;
            for a in 0..d {
                for b in a..d {
                    let mut w = [Complex64::new(0.0, 0.0); 9];
                    let mut any = false;
                    for al in 0..3 {
                        let (x, xi) = &rotated[&(s, al)];
                        for be in 0..3 {
                            let (y, yi) = &rotated[&(p, be)];
                            // w_ab = Y_ba X_ab
                            let re = y[[b, a]] * x[[a, b]];
                            let phase = i_pow(*xi as u32 + *yi as u32);
                            let v = phase * re;
                            if v.norm() > 1e-15 {
                                any = true;
                            }
                            w[al * 3 + be] = v;
                        }
                    }
                    if a == b {
                        for c in 0..9 {
                            constant[c] += w[c].re;
                        }
                    } else {
                        if any {
                            idx.push(k);
                            weights.push(w);
                        }
                        k += 1;
                    }
                }
            }
            PairPlan { constant, idx, weights }
        })
        .collect();

    let per_time: Vec<Vec<Matrix3<f64>>> = times
        .par_iter()
        .map_init(
            || vec![(0.0f64, 0.0f64); freqs.len()],
            |table, &t| {
                for (slot, &w) in table.iter_mut().zip(&freqs) {
                    // exp(-i w t) = cos - i sin
                    *slot = (w * t).sin_cos();
                }
                plans
                    .iter()
                    .map(|plan| {
                        let mut acc = [0.0; 9];
                        for (&k, w) in plan.idx.iter().zip(&plan.weights) {
                            let (sn, cs) = table[k as usize];
                            for c in 0..9 {
                                acc[c] += w[c].re * cs + w[c].im * sn;
                            }
                        }
                        Matrix3::from_fn(|al, be| norm * (plan.constant[al * 3 + be] + 2.0 * acc[al * 3 + be]))
                    })
                    .collect()
            },
        )
        .collect();
    transpose_series(per_time, pairs.len())
}

fn transpose_series(per_time: Vec<Vec<Matrix3<f64>>>, n_pairs: usize) -> Vec<Vec<Matrix3<f64>>> {
    let mut out: Vec<Vec<Matrix3<f64>>> = (0..n_pairs).map(|_| Vec::with_capacity(per_time.len())).collect();
    for row in per_time {
        for (series, m) in out.iter_mut().zip(row) {
            series.push(m);
        }
    }
    out
}

fn site_index(n: usize, site: usize, axis: Axis) -> usize {
    PauliString::single(n, site, axis).to_index(n)
}

fn spectral_tensors(n: usize, sp: &Spectral, pairs: &[(usize, usize)], times: &[f64]) -> Result<Vec<Vec<Matrix3<f64>>>> {
    let dim = sp.values.len();
    let mut coefs: std::collections::BTreeMap<usize, Array1<Complex64>> = Default::default();
    for &(s, _) in pairs {
        for axis in Axis::ALL {
            let idx = site_index(n, s, axis);
            if let std::collections::btree_map::Entry::Vacant(slot) = coefs.entry(idx) {
                let mut e = vec![Complex64::new(0.0, 0.0); dim];
                e[idx] = Complex64::new(1.0, 0.0);
                slot.insert(sp.coefficients(&e)?);
            }
        }
    }
    // d[pair][component][k] = V[probe, k] c_source[k]
    let products: Vec<Vec<Vec<Complex64>>> = pairs
        .iter()
        .map(|&(s, p)| {
            let mut comps = Vec::with_capacity(9);
            for al in Axis::ALL {
                let c = &coefs[&site_index(n, s, al)];
                for be in Axis::ALL {
                    let row = sp.vectors.row(site_index(n, p, be));
                    comps.push(row.iter().zip(c.iter()).map(|(v, c)| v * c).collect());
                }
            }
            comps
        })
        .collect();
    let per_time: Vec<Result<Vec<Matrix3<f64>>>> = times
        .par_iter()
        .map_init(
            || vec![Complex64::new(0.0, 0.0); dim],
            |expo, &t| {
                for (e, l) in expo.iter_mut().zip(sp.values.iter()) {
                    *e = (l * t).exp();
                }
                products
                    .iter()
                    .map(|comps| {
                        let mut m = Matrix3::zeros();
                        for (c, d) in comps.iter().enumerate() {
                            let v: Complex64 = d.iter().zip(expo.iter()).map(|(a, b)| a * b).sum();
                            if v.im.abs() > IMAG_TOL {
                                return Err(SpinError::ComplexCorrelation(v.im));
                            }
                            m[(c / 3, c % 3)] = v.re;
                        }
                        Ok(m)
                    })
                    .collect()
            },
        )
        .collect();
    let per_time: Vec<Vec<Matrix3<f64>>> = per_time.into_iter().collect::<Result<_>>()?;
    Ok(transpose_series(per_time, pairs.len()))
}

fn krylov_tensors(
    n: usize,
    g: &CsrMatrix<f64>,
    pairs: &[(usize, usize)],
    times: &[f64],
    tol: f64,
) -> Result<Vec<Vec<Matrix3<f64>>>> {
    let dim = g.nrows();
    let mut sources: Vec<usize> = pairs
        .iter()
        .flat_map(|&(s, _)| Axis::ALL.map(|a| site_index(n, s, a)))
        .collect();
    sources.sort_unstable();
    sources.dedup();
    let mut probes: Vec<usize> = pairs
        .iter()
        .flat_map(|&(_, p)| Axis::ALL.map(|a| site_index(n, p, a)))
        .collect();
    probes.sort_unstable();
    probes.dedup();
    // traj[source][time][probe]
    let traj: Vec<Vec<Vec<f64>>> = sources
        .par_iter()
        .map(|&src| {
            let mut v = vec![0.0; dim];
            v[src] = 1.0;
            let mut t_prev = 0.0;
            let mut rows = Vec::with_capacity(times.len());
            for &t in times {
                if t > t_prev {
                    v = expm_multiply(g, &v, t - t_prev, tol, DEFAULT_KRYLOV_DIM)?.0;
                }
                rows.push(probes.iter().map(|&p| v[p]).collect());
                t_prev = t;
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let pos = |list: &[usize], x: usize| list.binary_search(&x).expect("index registered");
    Ok(pairs
        .iter()
        .map(|&(s, p)| {
            (0..times.len())
                .map(|ti| {
                    Matrix3::from_fn(|al, be| {
                        let si = pos(&sources, site_index(n, s, Axis::ALL[al]));
                        let pi = pos(&probes, site_index(n, p, Axis::ALL[be]));
                        traj[si][ti][pi]
                    })
                })
                .collect()
        })
        .collect())
}

/// Convenience wrapper building a [`MoleculeModel`] for one tensor.
pub fn correlation_tensor(
    system: &SpinSystem,
    source: usize,
    probe: usize,
    grid: &TimeGrid,
    opts: &DynamicsOptions,
) -> Result<CorrelationTensor> {
    MoleculeModel::new(system, opts)?.correlation_tensor(source, probe, grid)
}

fn check_same_grid(a: &CorrelationTensor, b: &CorrelationTensor) -> Result<()> {
    if a.times != b.times || a.m.len() != b.m.len() {
        return Err(SpinError::GridMismatch);
    }
    Ok(())
}

/// `p(t) = 1/4 + 1/4 sum_ab mA_ab(t) mB_ab(t)`.
pub fn singlet_probability_factorized(ma: &CorrelationTensor, mb: &CorrelationTensor) -> Result<Vec<f64>> {
    check_same_grid(ma, mb)?;
    Ok(ma.m.iter().zip(&mb.m).map(|(a, b)| 0.25 + 0.25 * a.component_mul(b).sum()).collect())
}

// ---------------------------------------------------------------------------
// Direct joint evolution

/// Brute-force evolution of two molecules in their joint space.
#[derive(Clone, Debug)]
pub struct DirectEvolution {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    /// Reduced density of the designated pair, molecule A's spin first.
    pub pair_density: Vec<Array2<Complex64>>,
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
}

/// Singlet probability of `(pair.0 in A, pair.1 in B)` by direct joint evolution, capped at 6 spins.
pub fn joint_singlet_probability_direct(
    a: &SpinSystem,
    b: &SpinSystem,
    pair: (usize, usize),
    grid: &TimeGrid,
    opts: &DynamicsOptions,
) -> Result<DirectEvolution> {
    joint_singlet_probability_direct_capped(a, b, pair, grid, opts, DEFAULT_ORACLE_CAP)
}

pub fn joint_singlet_probability_direct_capped(
    a: &SpinSystem,
    b: &SpinSystem,
    pair: (usize, usize),
    grid: &TimeGrid,
    opts: &DynamicsOptions,
    cap: usize,
) -> Result<DirectEvolution> {
    let (na, nb) = (a.n_spins, b.n_spins);
    let total = na + nb;
    if total > cap {
        return Err(SpinError::OracleCap { requested: total, cap });
    }
    if pair.0 >= na {
        return Err(SpinError::SiteOutOfRange { site: pair.0, n_spins: na });
    }
    if pair.1 >= nb {
        return Err(SpinError::SiteOutOfRange { site: pair.1, n_spins: nb });
    }
    let sites = [pair.0, na + pair.1];
    let projector = singlet_projector(total, sites[0], sites[1])?;
    let rho0 = projector.scale(1.0 / projector.trace().re);

    let mut states: Vec<Operator> = Vec::with_capacity(grid.len());
    if !opts.relaxation {
        let ha = terms_to_operator(na, &coherent_terms(a, opts.per_site_shielding));
        let hb = terms_to_operator(nb, &coherent_terms(b, opts.per_site_shielding));
        let h = ha.kron(&Operator::identity(nb))?.add(&Operator::identity(na).kron(&hb)?)?;
        let (e, v) = eigh_hermitian(&h.to_dense())?;
        let v_adj = v.t().mapv(|x| x.conj());
        let r0 = v_adj.dot(&rho0.to_dense()).dot(&v);
        for &t in grid.points() {
            let phase: Vec<Complex64> = e.iter().map(|&ei| Complex64::new(0.0, -ei * t).exp()).collect();
            let rt = Array2::from_shape_fn(r0.dim(), |(i, j)| r0[[i, j]] * phase[i] * phase[j].conj());
            states.push(Operator::from_dense(&v.dot(&rt).dot(&v_adj))?);
        }
    } else {
        let split = joint_zeeman_split(a, b, opts)?;
        let (ga, gb) = match &split {
            Some((_, ga, gb)) => (ga.clone(), gb.clone()),
            None => (molecule_generator(a, opts)?, molecule_generator(b, opts)?),
        };
        let g = ga
            .kron(&CsrMatrix::identity(1 << (2 * nb)))
            .add(&CsrMatrix::identity(1 << (2 * na)).kron(&gb));
        let v0: Vec<Complex64> = rho0.to_pauli_vector();
        let tol = opts.krylov_tol.min(1e-12);
        let evolved = krylov_complex(&g, &v0, grid.points(), tol)?;
        for (v, &t) in evolved.iter().zip(grid.points()) {
            let rho = Operator::from_pauli_vector(total, v)?;
            states.push(match &split {
                Some((w, _, _)) => rotate_about_z(&rho, w * t)?,
                None => rho,
            });
        }
    }

    let p_vec = projector.to_pauli_vector();
    let mut out = DirectEvolution {
        times: grid.points().to_vec(),
        p: Vec::with_capacity(states.len()),
        pair_density: Vec::with_capacity(states.len()),
        max_trace_error: 0.0,
        max_hermiticity_error: 0.0,
    };
    for rho in &states {
        let v = rho.to_pauli_vector();
        let p: Complex64 = p_vec.iter().zip(&v).map(|(x, y)| x.conj() * y).sum();
        out.p.push(p.re);
        out.max_trace_error = out.max_trace_error.max((rho.trace() - 1.0).norm());
        let herm = rho.csr().sub(&rho.csr().adjoint()).max_abs();
        out.max_hermiticity_error = out.max_hermiticity_error.max(herm);
        out.pair_density.push(partial_trace(rho, &sites)?.to_dense());
    }
    Ok(out)
}

/// Larmor frequency with the Zeeman-free generators of molecules A and B.
type ZeemanSplit = (f64, CsrMatrix<f64>, CsrMatrix<f64>);

/// When both molecules share one Larmor frequency that commutes with the rest of their
/// generators, returns it with the Zeeman-free generators.
fn joint_zeeman_split(
    a: &SpinSystem,
    b: &SpinSystem,
    opts: &DynamicsOptions,
) -> Result<Option<ZeemanSplit>> {
    let mut omegas = larmor_frequencies(a, opts.per_site_shielding);
    omegas.extend(larmor_frequencies(b, opts.per_site_shielding));
    let w = omegas[0];
    if !opts.zeeman_frame || w == 0.0 || omegas.iter().any(|&x| x != w) {
        return Ok(None);
    }
    let rest = |s: &SpinSystem| -> Result<Option<CsrMatrix<f64>>> {
        let mut g = coherent_generator(s.n_spins, &coupling_terms(s));
        if opts.relaxation {
            let grid = orientation_grid(opts.orientation_kind, opts.orientation_count, opts.orientation_seed)?;
            g = g.add(&relaxation_superop(s, &opts.mechanisms, &grid)?.csr().real_part());
        }
        let z = coherent_generator(s.n_spins, &zeeman_terms(s, false));
        Ok((relative_commutator(&g, &z) <= 1e-10).then_some(g))
    };
    Ok(match (rest(a)?, rest(b)?) {
        (Some(ga), Some(gb)) => Some((w, ga, gb)),
        _ => None,
    })
}

/// `U rho U^dagger` with `U = exp(-i theta sum_k I_kz)`, applied in the computational basis.
fn rotate_about_z(rho: &Operator, theta: f64) -> Result<Operator> {
    let n = rho.n_spins();
    let m = |i: usize| 0.5 * n as f64 - i.count_ones() as f64;
    let d = rho.to_dense();
    let out = Array2::from_shape_fn(d.dim(), |(i, j)| d[[i, j]] * Complex64::new(0.0, -theta * (m(i) - m(j))).exp());
    Operator::from_dense(&out)
}

/// Full real generator of one molecule (coherent part plus optional relaxation), no rotating frame.
pub fn molecule_generator(system: &SpinSystem, opts: &DynamicsOptions) -> Result<CsrMatrix<f64>> {
    let mut g = coherent_generator(system.n_spins, &coherent_terms(system, opts.per_site_shielding));
    if opts.relaxation {
        let grid = orientation_grid(opts.orientation_kind, opts.orientation_count, opts.orientation_seed)?;
        g = g.add(&relaxation_superop(system, &opts.mechanisms, &grid)?.csr().real_part());
    }
    Ok(g)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::relaxation::default_orientation_grid;
    use crate::spin::pauli_site_op;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_system(n: usize, seed: u64, with_positions: bool) -> SpinSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut j = Array2::zeros((n, n));
        for a in 0..n {
            for b in a + 1..n {
                let v = rng.random_range(-1.0..1.0);
                j[[a, b]] = v;
                j[[b, a]] = v;
            }
        }
        let s = SpinSystem::from_couplings(j).unwrap().with_tau_c(1e-8).unwrap();
        if with_positions {
            let pos = (0..n)
                .map(|k| Vector3::new(2.5 * k as f64, rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                .collect();
            s.with_positions(pos).unwrap()
        } else {
            s
        }
    }

    #[test]
    fn grids() {
        let g = TimeGrid::default();
        assert_eq!(g.len(), 2000 + 19961);
        assert_eq!(g.points()[0], 0.0);
        assert!((g.end() - 1000.0).abs() < 1e-9);
        assert!(g.points().windows(2).all(|w| w[1] > w[0]));
        let l: TimeGrid = "linear:10:100".parse().unwrap();
        assert_eq!(l.len(), 101);
        assert_eq!(l.to_string(), "linear:10:100");
        let p: TimeGrid = g.to_string().parse().unwrap();
        assert_eq!(p, g);
        assert!(TimeGrid::from_points(vec![0.0, 1.0, 1.0]).is_err());
        assert!(TimeGrid::from_points(vec![0.5, 1.0]).is_err());
        assert!("piecewise:2:0.3:10:1".parse::<TimeGrid>().is_err());
    }

    #[test]
    fn zero_liouvillian_is_stationary() {
        let h = Operator::zeros(2);
        let l = build_liouvillian(&h, None).unwrap();
        let x0 = pauli_site_op(2, 0, Axis::X).unwrap();
        let grid = TimeGrid::linear(5.0, 5).unwrap();
        for m in [PropagationMethod::Eigendecomposition, PropagationMethod::KrylovExpm] {
            for x in propagate(&l, &x0, &grid, m, 1e-10).unwrap() {
                assert!(x.max_abs_diff(&x0) < 1e-14);
            }
        }
    }

    #[test]
    fn larmor_precession() {
        let w = 3.0;
        let h = pauli_site_op(1, 0, Axis::Z).unwrap().scale(w);
        let l = build_liouvillian(&h, None).unwrap();
        let x0 = pauli_site_op(1, 0, Axis::X).unwrap();
        let y = pauli_site_op(1, 0, Axis::Y).unwrap();
        let grid = TimeGrid::linear(2.0, 20).unwrap();
        for m in [PropagationMethod::Eigendecomposition, PropagationMethod::KrylovExpm] {
            let traj = propagate(&l, &x0, &grid, m, 1e-12).unwrap();
            for (x, &t) in traj.iter().zip(grid.points()) {
                let expect = x0.scale((w * t).cos()).add(&y.scale((w * t).sin())).unwrap();
                assert!(x.max_abs_diff(&expect) < 1e-10, "t = {t}");
            }
        }
        let id = l.apply(&Operator::identity(1)).unwrap();
        assert_eq!(id.frobenius_norm(), 0.0);
    }

    #[test]
    fn methods_agree_on_random_three_spin() {
        let s = random_system(3, 1, true).with_tau_c(1e-7).unwrap().with_field(0.0).unwrap();
        let h = crate::hamiltonian::build_coherent_hamiltonian(&s);
        let gamma = relaxation_superop(&s, &[Mechanism::Dipolar], &default_orientation_grid()).unwrap();
        let l = build_liouvillian(&h, Some(&gamma)).unwrap();
        let x0 = pauli_site_op(3, 0, Axis::X).unwrap();
        let grid = TimeGrid::linear(100.0, 50).unwrap();
        let a = propagate(&l, &x0, &grid, PropagationMethod::Eigendecomposition, 1e-12).unwrap();
        let b = propagate(&l, &x0, &grid, PropagationMethod::KrylovExpm, 1e-12).unwrap();
        let err = a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn spectra() {
        let s = random_system(2, 2, true).with_tau_c(1e-6).unwrap();
        let h = crate::hamiltonian::build_coherent_hamiltonian(&s);
        let closed = build_liouvillian(&h, None).unwrap();
        let (w, _) = closed.matrix().to_dense().eig().unwrap();
        let scale = closed.generator().frobenius_norm();
        assert!(w.iter().all(|l| l.im.abs() < 1e-10 * scale));
        let gamma = relaxation_superop(&s, &[Mechanism::Dipolar], &default_orientation_grid()).unwrap();
        let open = build_liouvillian(&h, Some(&gamma)).unwrap();
        let (w, _) = open.generator().to_dense().eig().unwrap();
        let scale = open.generator().frobenius_norm();
        assert!(w.iter().all(|l| l.re <= 1e-10 * scale));
        assert!(w.iter().any(|l| l.re < -1e-6));
    }

    #[test]
    fn tensor_initial_values() {
        let s = random_system(3, 3, false);
        let model = MoleculeModel::new(&s, &DynamicsOptions::coherent()).unwrap();
        let grid = TimeGrid::linear(1.0, 4).unwrap();
        let same = model.correlation_tensor(1, 1, &grid).unwrap();
        assert!((same.m[0] - Matrix3::identity()).abs().max() < 1e-12);
        let cross = model.correlation_tensor(0, 2, &grid).unwrap();
        assert!(cross.m[0].abs().max() < 1e-12);
        assert!(model.correlation_tensor(0, 3, &grid).is_err());
    }

    #[test]
    fn no_dynamics_gives_identity() {
        let s = SpinSystem::from_couplings(Array2::zeros((3, 3))).unwrap().with_field(0.0).unwrap();
        let model = MoleculeModel::new(&s, &DynamicsOptions::coherent()).unwrap();
        let t = model.correlation_tensor(0, 0, &TimeGrid::linear(100.0, 10).unwrap()).unwrap();
        for m in &t.m {
            assert!((m - Matrix3::identity()).abs().max() < 1e-14);
        }
    }

    #[test]
    fn two_spin_zz_matches_hilbert_oracle() {
        let j = 0.37;
        let mut jm = Array2::zeros((2, 2));
        jm[[0, 1]] = j;
        jm[[1, 0]] = j;
        let s = SpinSystem::from_couplings(jm).unwrap().with_field(0.0).unwrap();
        let grid = TimeGrid::linear(10.0, 200).unwrap();
        let t = correlation_tensor(&s, 0, 0, &grid, &DynamicsOptions::coherent()).unwrap();
        // brute force: Tr[Z0 exp(-iHt) Z0 exp(iHt)] / 4 with dense 4x4 matrices
        let h = crate::hamiltonian::build_coherent_hamiltonian(&s).to_dense();
        let (e, v) = crate::linalg::eigh_hermitian(&h).unwrap();
        let z0 = pauli_site_op(2, 0, Axis::Z).unwrap().scale(2.0).to_dense();
        for (m, &time) in t.m.iter().zip(grid.points()) {
            let u_diag = Array2::from_diag(&e.mapv(|x| Complex64::new(0.0, -x * time).exp()));
            let u = v.dot(&u_diag).dot(&v.t().mapv(|x| x.conj()));
            let ud = u.t().mapv(|x| x.conj());
            let val = z0.dot(&u).dot(&z0).dot(&ud).diag().sum() / 4.0;
            assert!((m[(2, 2)] - val.re).abs() < 1e-12);
            let analytic = 0.5 + 0.5 * (2.0 * std::f64::consts::PI * j * time).cos();
            assert!((m[(2, 2)] - analytic).abs() < 1e-12);
        }
    }

    #[test]
    fn engines_agree() {
        let s = random_system(3, 4, true).with_field(2e-6).unwrap();
        let grid = TimeGrid::linear(20.0, 40).unwrap();
        let pairs = [(0, 0), (0, 2), (1, 2)];
        let reference = {
            let opts = DynamicsOptions {
                zeeman_frame: false,
                ..DynamicsOptions::coherent()
            };
            MoleculeModel::new(&s, &opts).unwrap().correlation_tensors(&pairs, &grid).unwrap()
        };
        let variants = [
            DynamicsOptions::coherent(),
            DynamicsOptions {
                method: PropagationMethod::KrylovExpm,
                krylov_tol: 1e-12,
                ..DynamicsOptions::coherent()
            },
            DynamicsOptions {
                method: PropagationMethod::KrylovExpm,
                zeeman_frame: false,
                krylov_tol: 1e-12,
                ..DynamicsOptions::coherent()
            },
        ];
        for opts in variants {
            let got = MoleculeModel::new(&s, &opts).unwrap().correlation_tensors(&pairs, &grid).unwrap();
            for (a, b) in got.iter().zip(&reference) {
                for (x, y) in a.m.iter().zip(&b.m) {
                    assert!((x - y).abs().max() < 1e-9, "{opts:?}");
                }
            }
        }
    }

    #[test]
    fn relaxing_engines_agree() {
        let s = random_system(3, 5, true).with_field(2e-6).unwrap();
        let grid = TimeGrid::linear(20.0, 20).unwrap();
        let pairs = [(0, 0), (2, 1)];
        let base = DynamicsOptions::with_relaxation(&[Mechanism::Dipolar]);
        let framed = MoleculeModel::new(&s, &base).unwrap();
        assert!(framed.uses_zeeman_frame());
        let a = framed.correlation_tensors(&pairs, &grid).unwrap();
        let b = MoleculeModel::new(
            &s,
            &DynamicsOptions {
                zeeman_frame: false,
                method: PropagationMethod::KrylovExpm,
                krylov_tol: 1e-12,
                ..base.clone()
            },
        )
        .unwrap()
        .correlation_tensors(&pairs, &grid)
        .unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.m.iter().zip(&y.m) {
                assert!((p - q).abs().max() < 1e-9);
            }
        }
        // relaxation shrinks the autocorrelation
        let last = a[0].m.last().unwrap();
        assert!(last.singular_values().max() < 1.0);
    }

    #[test]
    fn factorized_limits() {
        let times = vec![0.0, 1.0];
        let ident = CorrelationTensor {
            times: times.clone(),
            m: vec![Matrix3::identity(); 2],
            source: 0,
            probe: 0,
        };
        let zero = CorrelationTensor {
            m: vec![Matrix3::zeros(); 2],
            ..ident.clone()
        };
        assert_eq!(singlet_probability_factorized(&ident, &ident).unwrap(), vec![1.0, 1.0]);
        assert_eq!(singlet_probability_factorized(&zero, &zero).unwrap(), vec![0.25, 0.25]);
        let other = CorrelationTensor {
            times: vec![0.0, 2.0],
            ..ident.clone()
        };
        assert!(matches!(singlet_probability_factorized(&ident, &other), Err(SpinError::GridMismatch)));
    }

    #[test]
    fn factorization_matches_direct() {
        let grid = TimeGrid::linear(20.0, 20).unwrap();
        for (seed, relax) in [(10u64, false), (11, true)] {
            let a = random_system(2, seed, true);
            let b = random_system(3, seed + 100, true);
            let opts = if relax {
                DynamicsOptions::with_relaxation(&[Mechanism::Dipolar])
            } else {
                DynamicsOptions::coherent()
            };
            let direct = joint_singlet_probability_direct(&a, &b, (1, 2), &grid, &opts).unwrap();
            let ma = correlation_tensor(&a, 1, 1, &grid, &opts).unwrap();
            let mb = correlation_tensor(&b, 2, 2, &grid, &opts).unwrap();
            let p = singlet_probability_factorized(&ma, &mb).unwrap();
            let err = p.iter().zip(&direct.p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "relax {relax}: err {err}");
            assert!(direct.max_trace_error < 1e-10);
            assert!(direct.max_hermiticity_error < 1e-10);
            assert!((direct.p[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_cap_and_stationary_singlet() {
        let grid = TimeGrid::linear(10.0, 5).unwrap();
        let a = random_system(4, 1, false);
        let b = random_system(3, 2, false);
        assert!(matches!(
            joint_singlet_probability_direct(&a, &b, (0, 0), &grid, &DynamicsOptions::coherent()),
            Err(SpinError::OracleCap { requested: 7, cap: 6 })
        ));
        let zero = SpinSystem::from_couplings(Array2::zeros((2, 2))).unwrap();
        let d = joint_singlet_probability_direct(&zero, &zero, (0, 1), &grid, &DynamicsOptions::coherent()).unwrap();
        assert!(d.p.iter().all(|p| (p - 1.0).abs() < 1e-12));
    }
}
