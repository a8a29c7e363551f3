//! Coherent and orientation-dependent spin Hamiltonians, in rad/s.
//!
//! Every builder has a `*_terms` form returning real coefficients on Pauli
//! strings (`sigma` products, not `I = sigma / 2`), which is what the
//! relaxation and propagation code consumes, and an [`Operator`] form.

use crate::error::{Result, SpinError};
use crate::pauli::PauliString;
use crate::spin::{Axis, Operator, SpinSystem};
use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use num_complex::Complex64;
use std::collections::BTreeMap;

/// Vacuum permeability over 4 pi, in T m / A.
pub const MU0_OVER_4PI: f64 = 1.000_000_000_55e-7;
/// Reduced Planck constant in J s.
pub const HBAR: f64 = 1.054_571_817e-34;

pub type PauliTerms = Vec<(PauliString, f64)>;

/// A proper rotation applied to the molecule's geometry in a fixed lab frame.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Orientation {
    rotation: Matrix3<f64>,
}

impl Orientation {
    pub fn new(rotation: Matrix3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= 1e-12) {
            return Err(SpinError::InvalidOrientation(format!("R^T R deviates from identity by {err:e}")));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-12 {
            return Err(SpinError::InvalidOrientation(format!("determinant {det}, expected +1")));
        }
        Ok(Orientation { rotation })
    }

    pub fn identity() -> Self {
        Orientation {
            rotation: Matrix3::identity(),
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Orientation {
            rotation: *q.to_rotation_matrix().matrix(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
        Orientation { rotation: *r.matrix() }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn compose(&self, other: &Orientation) -> Orientation {
        Orientation {
            rotation: self.rotation * other.rotation,
        }
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

fn pair_string(n: usize, j: usize, a: Axis, k: usize, b: Axis) -> PauliString {
    PauliString::single(n, j, a).mul(PauliString::single(n, k, b)).1
}

/// Merges duplicate strings and drops exact zeros, in a fixed order.
pub fn merge_terms(terms: impl IntoIterator<Item = (PauliString, f64)>) -> PauliTerms {
    let mut acc: BTreeMap<PauliString, f64> = BTreeMap::new();
    for (s, c) in terms {
        *acc.entry(s).or_insert(0.0) += c;
    }
    acc.into_iter().filter(|&(_, c)| c != 0.0).collect()
}

pub fn terms_to_operator(n_spins: usize, terms: &[(PauliString, f64)]) -> Operator {
    let complex: Vec<_> = terms.iter().map(|&(s, c)| (s, Complex64::new(c, 0.0))).collect();
    Operator::from_pauli_terms(n_spins, &complex)
}

/// Zeeman offsets in rad/s for each spin, `-gamma (1 - sigma) B`.
pub fn larmor_frequencies(system: &SpinSystem, per_site_shielding: bool) -> Vec<f64> {
    let iso = system.isotropic_shielding();
    let n = system.n_spins;
    let mean = iso.iter().sum::<f64>() / n as f64;
    (0..n)
        .map(|k| {
            let s = if per_site_shielding { iso[k] } else { mean };
            -system.gamma_rad_s_t * (1.0 - s) * system.b_field_t
        })
        .collect()
}

/// Scalar-coupling part of the coherent Hamiltonian.
pub fn coupling_terms(system: &SpinSystem) -> PauliTerms {
    let n = system.n_spins;
    let mut out = Vec::new();
    for (j, k) in system.pairs() {
        let c = 2.0 * std::f64::consts::PI * system.j_hz[[j, k]] / 4.0;
        if c != 0.0 {
            for a in Axis::ALL {
                out.push((pair_string(n, j, a, k, a), c));
            }
        }
    }
    merge_terms(out)
}

/// Zeeman part of the coherent Hamiltonian.
pub fn zeeman_terms(system: &SpinSystem, per_site_shielding: bool) -> PauliTerms {
    let n = system.n_spins;
    let w = larmor_frequencies(system, per_site_shielding);
    merge_terms((0..n).map(|k| (PauliString::single(n, k, Axis::Z), w[k] / 2.0)))
}

pub fn coherent_terms(system: &SpinSystem, per_site_shielding: bool) -> PauliTerms {
    let mut t = coupling_terms(system);
    t.extend(zeeman_terms(system, per_site_shielding));
    merge_terms(t)
}

/// `H0 = w0 sum_k I_kz + 2 pi sum_{j<k} J_jk I_j . I_k` with a uniform isotropic shielding.
pub fn build_coherent_hamiltonian(system: &SpinSystem) -> Operator {
    build_coherent_hamiltonian_with(system, false)
}

/// As [`build_coherent_hamiltonian`], optionally with per-site isotropic shieldings.
pub fn build_coherent_hamiltonian_with(system: &SpinSystem, per_site_shielding: bool) -> Operator {
    terms_to_operator(system.n_spins, &coherent_terms(system, per_site_shielding))
}

/// Dipolar coupling constant `mu0 gamma^2 hbar / (4 pi r^3)` in rad/s for `r` in Angstrom.
pub fn dipolar_constant(gamma: f64, r_angstrom: f64) -> f64 {
    let r = r_angstrom * 1e-10;
    MU0_OVER_4PI * gamma * gamma * HBAR / (r * r * r)
}

pub fn dipolar_terms(system: &SpinSystem, orientation: &Orientation) -> Result<PauliTerms> {
    let pos = system
        .positions
        .as_ref()
        .ok_or_else(|| SpinError::MissingInput("dipolar coupling needs nuclear positions".into()))?;
    let n = system.n_spins;
    let mut out = Vec::new();
    for (j, k) in system.pairs() {
        let d = orientation.apply(&(pos[k] - pos[j]));
        let r = d.norm();
        if r <= 0.0 {
            return Err(SpinError::CoincidentNuclei(j, k));
        }
        let u = d / r;
        let b = dipolar_constant(system.gamma_rad_s_t, r);
        for (ia, a) in Axis::ALL.into_iter().enumerate() {
            for (ib, bb) in Axis::ALL.into_iter().enumerate() {
                let delta = if ia == ib { 1.0 } else { 0.0 };
                let c = -b / 4.0 * (delta - 3.0 * u[ia] * u[ib]);
                if c != 0.0 {
                    out.push((pair_string(n, j, a, k, bb), c));
                }
            }
        }
    }
    Ok(merge_terms(out))
}

/// `-sum_{j<k} b_jk [I_j . I_k - 3 (I_j . r_jk)(I_k . r_jk)]` at the given orientation.
pub fn build_dipolar_hamiltonian(system: &SpinSystem, orientation: &Orientation) -> Result<Operator> {
    Ok(terms_to_operator(system.n_spins, &dipolar_terms(system, orientation)?))
}

/// Traceless symmetric part of a shielding tensor.
pub fn anisotropic_part(sigma: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (sigma + sigma.transpose()) * 0.5;
    sym - Matrix3::identity() * (sym.trace() / 3.0)
}

pub fn csa_terms(system: &SpinSystem, orientation: &Orientation) -> Result<PauliTerms> {
    let tensors = system
        .shielding
        .as_ref()
        .ok_or_else(|| SpinError::MissingInput("CSA needs shielding tensors".into()))?;
    let n = system.n_spins;
    let r = orientation.matrix();
    let gb = system.gamma_rad_s_t * system.b_field_t;
    let mut out = Vec::new();
    for (k, sigma) in tensors.iter().enumerate() {
        let a = r * anisotropic_part(sigma) * r.transpose();
        for (ia, axis) in Axis::ALL.into_iter().enumerate() {
            let c = -gb * a[(ia, 2)] / 2.0;
            if c != 0.0 {
                out.push((PauliString::single(n, k, axis), c));
            }
        }
    }
    Ok(merge_terms(out))
}

/// `-gamma B sum_k sum_a A_k[a, z] I_ka` with `A_k` the anisotropic part of the rotated tensor.
pub fn build_csa_hamiltonian(system: &SpinSystem, orientation: &Orientation) -> Result<Operator> {
    Ok(terms_to_operator(system.n_spins, &csa_terms(system, orientation)?))
}
