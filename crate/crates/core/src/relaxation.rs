//! Extreme-narrowing relaxation superoperator `Gamma = -tau_c <C(H1) C(H1)>`.
//!
//! The orientational average is taken over the second moments of the
//! perturbing Hamiltonian's Pauli coefficients, `M_PQ = <h_P h_Q>`, and then
//! expanded as `-tau_c sum_PQ M_PQ C(P) C(Q)`. This is the same average as
//! squaring `C(H1(Omega))` per orientation, evaluated in the Pauli basis.

use crate::error::{Result, SpinError};
use crate::hamiltonian::{csa_terms, dipolar_terms, Orientation, PauliTerms};
use crate::pauli::{i_pow, PauliString};
use crate::sparse::CsrMatrix;
use crate::spin::{shared_basis, SpinSystem, SuperOperator, MAX_LIOUVILLE_SPINS};
use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector4};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

/// Relative Frobenius change allowed between a grid and its doubling.
pub const CONVERGENCE_TOL: f64 = 1e-3;
/// Size of the icosahedral rotation group.
pub const ICOSAHEDRAL_ORDER: usize = 60;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// Icosahedral rotation group, optionally in several randomly rotated copies.
    SphericalDesign,
    RandomUniform,
}

impl FromStr for GridKind {
    type Err = SpinError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spherical-design" | "design" => Ok(GridKind::SphericalDesign),
            "random-uniform" | "random" => Ok(GridKind::RandomUniform),
            other => Err(SpinError::InvalidArgument(format!("unknown grid kind `{other}`"))),
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridKind::SphericalDesign => "spherical-design",
            GridKind::RandomUniform => "random-uniform",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Dipolar,
    Csa,
}

impl FromStr for Mechanism {
    type Err = SpinError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dipolar" | "dd" => Ok(Mechanism::Dipolar),
            "csa" => Ok(Mechanism::Csa),
            other => Err(SpinError::InvalidArgument(format!("unknown relaxation mechanism `{other}`"))),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Dipolar => "dipolar",
            Mechanism::Csa => "csa",
        })
    }
}

/// Equal-weight set of rotations approximating the Haar measure on SO(3).
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationGrid {
    pub kind: GridKind,
    pub seed: u64,
    rotations: Vec<Orientation>,
}

impl OrientationGrid {
    pub fn rotations(&self) -> &[Orientation] {
        &self.rotations
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Orientation {
    let v: Vector4<f64> = Vector4::from_fn(|_, _| StandardNormal.sample(rng));
    let q = nalgebra::Quaternion::new(v[0], v[1], v[2], v[3]);
    Orientation::from_quaternion(UnitQuaternion::from_quaternion(q))
}

/// The 60 proper rotations of the icosahedron, closed from two generators.
pub fn icosahedral_group() -> Vec<Orientation> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let gens = [
        Orientation::from_axis_angle(Vector3::new(0.0, 1.0, phi), 2.0 * std::f64::consts::PI / 5.0),
        Orientation::from_axis_angle(Vector3::new(1.0, 1.0, 1.0), 2.0 * std::f64::consts::PI / 3.0),
    ];
    let mut group = vec![Orientation::identity()];
    let mut frontier = group.clone();
    let same = |a: &Matrix3<f64>, b: &Matrix3<f64>| (a - b).abs().max() < 1e-9;
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for g in &frontier {
            for h in &gens {
                let c = g.compose(h);
                if !group.iter().any(|e| same(e.matrix(), c.matrix())) {
                    group.push(c);
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    assert_eq!(group.len(), ICOSAHEDRAL_ORDER);
    // re-orthonormalize accumulated products
    group
        .into_iter()
        .map(|o| Orientation::from_quaternion(UnitQuaternion::from_matrix(o.matrix())))
        .collect()
}

/// Builds an orientation grid.
///
/// `SphericalDesign` returns `ceil(count / 60)` copies of the icosahedral group,
/// the first unrotated and the rest composed with seeded random rotations. Each
/// copy averages every Wigner function of rank 1 to 5 to zero exactly, so
/// products of two rank-2 interactions are integrated without error.
/// `RandomUniform` returns `count` seeded Haar-random rotations.
pub fn orientation_grid(kind: GridKind, count: usize, seed: u64) -> Result<OrientationGrid> {
    if count < 1 {
        return Err(SpinError::InvalidArgument("orientation count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotations = match kind {
        GridKind::RandomUniform => (0..count).map(|_| random_rotation(&mut rng)).collect(),
        GridKind::SphericalDesign => {
            let base = icosahedral_group();
            let copies = count.div_ceil(ICOSAHEDRAL_ORDER);
            let mut out = Vec::with_capacity(copies * ICOSAHEDRAL_ORDER);
            for c in 0..copies {
                let r = if c == 0 { Orientation::identity() } else { random_rotation(&mut rng) };
                out.extend(base.iter().map(|g| g.compose(&r)));
            }
            out
        }
    };
    Ok(OrientationGrid { kind, seed, rotations })
}

/// The default grid: a single icosahedral design.
pub fn default_orientation_grid() -> OrientationGrid {
    orientation_grid(GridKind::SphericalDesign, ICOSAHEDRAL_ORDER, 0).expect("nonzero count")
}

fn check_mechanisms(system: &SpinSystem, mechanisms: &[Mechanism]) -> Result<()> {
    if mechanisms.is_empty() {
        return Err(SpinError::NoMechanism);
    }
    for m in mechanisms {
        match m {
            Mechanism::Dipolar if system.positions.is_none() => {
                return Err(SpinError::MissingInput("dipolar relaxation needs nuclear positions".into()))
            }
            Mechanism::Csa if system.shielding.is_none() => {
                return Err(SpinError::MissingInput("CSA relaxation needs shielding tensors".into()))
            }
            Mechanism::Csa if system.b_field_t <= 0.0 => {
                return Err(SpinError::MissingInput("CSA relaxation needs a positive field".into()))
            }
            _ => {}
        }
    }
    if system.n_spins > MAX_LIOUVILLE_SPINS {
        return Err(SpinError::SpinCount(system.n_spins));
    }
    Ok(())
}

/// Perturbing Hamiltonian at one orientation, summed over mechanisms.
pub fn perturbation_terms(system: &SpinSystem, mechanisms: &[Mechanism], o: &Orientation) -> Result<PauliTerms> {
    let mut all = Vec::new();
    if mechanisms.contains(&Mechanism::Dipolar) {
        all.extend(dipolar_terms(system, o)?);
    }
    if mechanisms.contains(&Mechanism::Csa) {
        all.extend(csa_terms(system, o)?);
    }
    Ok(crate::hamiltonian::merge_terms(all))
}

/// Orientationally averaged second moments `M_PQ = <h_P h_Q>` of the perturbation.
pub fn second_moments(
    system: &SpinSystem,
    mechanisms: &[Mechanism],
    grid: &OrientationGrid,
) -> Result<(Vec<PauliString>, Vec<Vec<f64>>)> {
    check_mechanisms(system, mechanisms)?;
    let per_orientation: Vec<PauliTerms> = grid
        .rotations()
        .par_iter()
        .map(|o| perturbation_terms(system, mechanisms, o))
        .collect::<Result<_>>()?;
    let mut support: BTreeMap<PauliString, usize> = BTreeMap::new();
    for terms in &per_orientation {
        for (s, _) in terms {
            let next = support.len();
            support.entry(*s).or_insert(next);
        }
    }
    // stable ordering by string, independent of discovery order
    let strings: Vec<PauliString> = support.keys().copied().collect();
    let index: BTreeMap<PauliString, usize> = strings.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let m = strings.len();
    let mut moments = vec![vec![0.0; m]; m];
    let weight = 1.0 / grid.len() as f64;
    let mut dense = vec![0.0; m];
    for terms in &per_orientation {
        dense.iter_mut().for_each(|v| *v = 0.0);
        for (s, c) in terms {
            dense[index[s]] = *c;
        }
        for (i, row) in moments.iter_mut().enumerate() {
            if dense[i] == 0.0 {
                continue;
            }
            for (j, out) in row.iter_mut().enumerate() {
                *out += weight * dense[i] * dense[j];
            }
        }
    }
    Ok((strings, moments))
}

/// `Gamma = -tau_c avg_Omega C(H1(Omega)) C(H1(Omega))` in the Pauli basis.
pub fn relaxation_superop(system: &SpinSystem, mechanisms: &[Mechanism], grid: &OrientationGrid) -> Result<SuperOperator> {
    let (strings, moments) = second_moments(system, mechanisms, grid)?;
    let n = system.n_spins;
    let basis = shared_basis(n);
    let dim = basis.dim();
    let mut pairs: Vec<(PauliString, PauliString, f64)> = Vec::new();
    for (i, p) in strings.iter().enumerate() {
        for (j, q) in strings.iter().enumerate() {
            let w = moments[i][j];
            if w != 0.0 {
                pairs.push((*p, *q, w));
            }
        }
    }
    let tau = system.tau_c_s;
    let columns: Vec<Vec<(usize, f64)>> = (0..dim)
        .into_par_iter()
        .map(|col| {
            let r = basis.string(col);
            let mut acc: BTreeMap<usize, Complex64> = BTreeMap::new();
            for &(p, q, w) in &pairs {
                if q.commutes_with(r) {
                    continue;
                }
                let (k1, r1) = q.mul(r);
                if p.commutes_with(r1) {
                    continue;
                }
                let (k2, r2) = p.mul(r1);
                // C(P) C(Q) R = 4 P Q R
                *acc.entry(basis.index(r2)).or_default() += i_pow(k1 + k2) * (-4.0 * tau * w);
            }
            acc.into_iter()
                .filter_map(|(row, v)| {
                    debug_assert!(v.im.abs() <= 1e-9 * v.re.abs().max(1e-300));
                    (v.re != 0.0).then_some((row, v.re))
                })
                .collect()
        })
        .collect();
    let mut trip = Vec::new();
    for (col, entries) in columns.into_iter().enumerate() {
        for (row, v) in entries {
            trip.push((row, col, Complex64::new(v, 0.0)));
        }
    }
    SuperOperator::new(n, CsrMatrix::from_triplets(dim, dim, trip), true, true)
}

/// Relaxation superoperator on a grid of `count` orientations, checked against `2 count`.
///
/// Returns the refined superoperator together with the relative Frobenius change.
pub fn relaxation_superop_converged(
    system: &SpinSystem,
    mechanisms: &[Mechanism],
    kind: GridKind,
    count: usize,
    seed: u64,
    tol: f64,
) -> Result<(SuperOperator, f64)> {
    let coarse = relaxation_superop(system, mechanisms, &orientation_grid(kind, count, seed)?)?;
    let fine = relaxation_superop(system, mechanisms, &orientation_grid(kind, 2 * count, seed)?)?;
    let norm = fine.frobenius_norm();
    let change = if norm == 0.0 {
        0.0
    } else {
        fine.csr().sub(coarse.csr()).frobenius_norm() / norm
    };
    if change > tol {
        return Err(SpinError::QuadratureTooCoarse { change, tol });
    }
    Ok((fine, change))
}

/// `-<X, Gamma X> / <X, X>` for the total z magnetization, the longitudinal rate in s^-1.
pub fn longitudinal_rate(gamma: &SuperOperator) -> Result<f64> {
    let n = gamma.n_spins();
    let fz = crate::spin::total_spin_op(n, crate::spin::Axis::Z)?;
    let v = fz.to_pauli_vector();
    let gv = gamma.csr().matvec(&v);
    let num: Complex64 = v.iter().zip(&gv).map(|(a, b)| a.conj() * b).sum();
    let den: f64 = v.iter().map(|a| a.norm_sqr()).sum();
    Ok(-num.re / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{build_dipolar_hamiltonian, dipolar_constant};
    use crate::spin::{commutator_superop, Operator};
    use ndarray::Array2;
    use ndarray_linalg::{Eigh, UPLO};
    use rand::Rng;

    fn system(n: usize, seed: u64) -> SpinSystem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut j = Array2::zeros((n, n));
        for a in 0..n {
            for b in a + 1..n {
                let v = rng.random_range(-0.5..0.5);
                j[[a, b]] = v;
                j[[b, a]] = v;
            }
        }
        let pos = (0..n)
            .map(|k| Vector3::new(3.0 * k as f64, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let sh = (0..n)
            .map(|_| Matrix3::from_fn(|_, _| rng.random_range(-1e-4..1e-4)))
            .collect();
        SpinSystem::from_couplings(j)
            .unwrap()
            .with_positions(pos)
            .unwrap()
            .with_shielding(sh)
            .unwrap()
            .with_field(1.0)
            .unwrap()
    }

    #[test]
    fn icosahedral_group_is_closed() {
        let g = icosahedral_group();
        assert_eq!(g.len(), 60);
        for o in &g {
            assert!(Orientation::new(*o.matrix()).is_ok());
        }
        // rank 1 and rank 2 averages vanish
        let mean: Matrix3<f64> = g.iter().map(|o| *o.matrix()).sum::<Matrix3<f64>>() / 60.0;
        assert!(mean.abs().max() < 1e-12);
        let u = Vector3::new(0.3, -0.5, 0.8).normalize();
        let second: Matrix3<f64> = g
            .iter()
            .map(|o| {
                let v = o.apply(&u);
                v * v.transpose()
            })
            .sum::<Matrix3<f64>>()
            / 60.0;
        assert!((second - Matrix3::identity() / 3.0).abs().max() < 1e-12);
    }

    #[test]
    fn random_grid_mean_is_small() {
        let count = 2000;
        let g = orientation_grid(GridKind::RandomUniform, count, 42).unwrap();
        let mean: Matrix3<f64> = g.rotations().iter().map(|o| *o.matrix()).sum::<Matrix3<f64>>() / count as f64;
        assert!(mean.norm() < 3.0 / (count as f64).sqrt());
        assert_eq!(g, orientation_grid(GridKind::RandomUniform, count, 42).unwrap());
        assert!(orientation_grid(GridKind::RandomUniform, 0, 1).is_err());
    }

    #[test]
    fn dipolar_average_vanishes() {
        let s = system(3, 1);
        let g = default_orientation_grid();
        let mut acc = Operator::zeros(3);
        for o in g.rotations() {
            acc = acc.add(&build_dipolar_hamiltonian(&s, o).unwrap()).unwrap();
        }
        let single = build_dipolar_hamiltonian(&s, &Orientation::identity()).unwrap().frobenius_norm();
        assert!(acc.frobenius_norm() / 60.0 < 1e-12 * single);
    }

    #[test]
    fn moment_expansion_matches_direct_average() {
        let s = system(3, 2);
        let mechs = [Mechanism::Dipolar, Mechanism::Csa];
        let grid = orientation_grid(GridKind::RandomUniform, 7, 3).unwrap();
        let gamma = relaxation_superop(&s, &mechs, &grid).unwrap();
        let dim = 64;
        let mut direct = Array2::<Complex64>::zeros((dim, dim));
        for o in grid.rotations() {
            let h = build_dipolar_hamiltonian(&s, o)
                .unwrap()
                .add(&crate::hamiltonian::build_csa_hamiltonian(&s, o).unwrap())
                .unwrap();
            let c = commutator_superop(&h).unwrap().csr().to_dense();
            direct = direct + c.dot(&c);
        }
        direct *= Complex64::new(-s.tau_c_s / 7.0, 0.0);
        let got = gamma.csr().to_dense();
        let scale = direct.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let diff = (&got - &direct).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-10 * scale, "diff {diff} scale {scale}");
    }

    #[test]
    fn gamma_structure() {
        let s = system(3, 4);
        let gamma = relaxation_superop(&s, &[Mechanism::Dipolar, Mechanism::Csa], &default_orientation_grid()).unwrap();
        assert!(gamma.csr().max_imag() == 0.0);
        let id = gamma.apply(&Operator::identity(3)).unwrap();
        assert!(id.frobenius_norm() < 1e-14 * gamma.frobenius_norm());
        // trace annihilation: the identity row is empty
        assert_eq!(gamma.csr().row(0).count(), 0);
        let dense = gamma.csr().real_part().to_dense();
        let asym = (&dense - &dense.t()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(asym < 1e-12 * gamma.frobenius_norm());
        let (w, _) = dense.eigh(UPLO::Lower).unwrap();
        let eps = 1e-10 * gamma.frobenius_norm();
        assert!(w.iter().all(|&l| l <= eps));
    }

    #[test]
    fn isotropic_csa_gives_zero() {
        let mut s = system(2, 5);
        s.shielding = Some(vec![Matrix3::identity() * 2e-4; 2]);
        let gamma = relaxation_superop(&s, &[Mechanism::Csa], &default_orientation_grid()).unwrap();
        assert_eq!(gamma.csr().nnz(), 0);
    }

    #[test]
    fn mechanism_errors() {
        let s = SpinSystem::from_couplings(Array2::zeros((2, 2))).unwrap();
        let g = default_orientation_grid();
        assert!(matches!(relaxation_superop(&s, &[], &g), Err(SpinError::NoMechanism)));
        assert!(matches!(relaxation_superop(&s, &[Mechanism::Dipolar], &g), Err(SpinError::MissingInput(_))));
        assert!(matches!(relaxation_superop(&s, &[Mechanism::Csa], &g), Err(SpinError::MissingInput(_))));
    }

    #[test]
    fn dipolar_gamma_is_field_independent() {
        let s = system(2, 6);
        let g = default_orientation_grid();
        let a = relaxation_superop(&s.clone().with_field(0.0).unwrap(), &[Mechanism::Dipolar], &g).unwrap();
        let b = relaxation_superop(&s.with_field(50e-6).unwrap(), &[Mechanism::Dipolar], &g).unwrap();
        assert_eq!(a.csr(), b.csr());
    }

    #[test]
    fn design_grid_is_converged() {
        let s = system(3, 7);
        let (_, change) = relaxation_superop_converged(
            &s,
            &[Mechanism::Dipolar, Mechanism::Csa],
            GridKind::SphericalDesign,
            60,
            9,
            CONVERGENCE_TOL,
        )
        .unwrap();
        assert!(change < 1e-12, "change {change}");
    }

    #[test]
    fn random_grid_refinement_shrinks() {
        let s = system(2, 8);
        let mech = [Mechanism::Dipolar];
        let exact = relaxation_superop(&s, &mech, &default_orientation_grid()).unwrap();
        let err = |count| {
            let g = orientation_grid(GridKind::RandomUniform, count, 11).unwrap();
            let a = relaxation_superop(&s, &mech, &g).unwrap();
            a.csr().sub(exact.csr()).frobenius_norm() / exact.frobenius_norm()
        };
        assert!(err(4000) < err(40));
    }

    #[test]
    fn two_spin_rate_scale() {
        let s = SpinSystem::from_couplings(Array2::zeros((2, 2)))
            .unwrap()
            .with_positions(vec![Vector3::zeros(), Vector3::new(1.0, 2.0, 3.5)])
            .unwrap();
        let gamma = relaxation_superop(&s, &[Mechanism::Dipolar], &default_orientation_grid()).unwrap();
        let b = dipolar_constant(s.gamma_rad_s_t, Vector3::new(1.0, 2.0, 3.5).norm());
        let rate = longitudinal_rate(&gamma).unwrap();
        assert!((rate / (b * b * s.tau_c_s) - 1.5).abs() < 1e-10, "ratio {}", rate / (b * b * s.tau_c_s));
    }
}
