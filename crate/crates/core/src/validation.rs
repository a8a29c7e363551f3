//! Self-check suite comparing the factorized path with direct joint evolution and the two propagation engines.

use crate::dynamics::{
    joint_singlet_probability_direct, singlet_probability_factorized, DynamicsOptions, MoleculeModel, PropagationMethod,
    TimeGrid, DEFAULT_ORACLE_CAP,
};
use crate::ensemble::sample_seed;
use crate::error::{Result, SpinError};
use crate::observables::reduced_pair_density;
use crate::relaxation::Mechanism;
use crate::spin::SpinSystem;
use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Correlation time used for the random molecules, long enough for visible relaxation within seconds.
pub const CHECK_TAU_C_S: f64 = 1e-8;

/// Random molecule: J uniform in [-1, 1) Hz, nuclei at least 2.5 Angstrom apart inside a 6 Angstrom cube.
pub fn random_molecule(n: usize, seed: u64, b_field_t: f64) -> Result<SpinSystem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = Array2::zeros((n, n));
    for a in 0..n {
        for b in a + 1..n {
            let v = rng.random_range(-1.0..1.0);
            j[[a, b]] = v;
            j[[b, a]] = v;
        }
    }
    let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(n);
    while pos.len() < n {
        let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        if pos.iter().all(|q| (p - q).norm() > 2.5) {
            pos.push(p);
        }
    }
    Ok(SpinSystem::from_couplings(j)?
        .with_positions(pos)?
        .with_tau_c(CHECK_TAU_C_S)?
        .with_field(b_field_t)?
        .with_label(format!("check-n{n}-{seed:016x}"), "C1"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSpec {
    /// Largest spin count per molecule; both molecules together must fit the direct-evolution cap.
    pub max_spins: usize,
    pub cases: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    /// Bound on factorized-versus-direct deviations of p and of the pair density.
    pub tolerance: f64,
    /// Bound on eigendecomposition-versus-Krylov deviations of the correlation tensor.
    pub method_tolerance: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            max_spins: 3,
            cases: 10,
            seed: 0,
            grid: TimeGrid::linear(20.0, 40).expect("valid grid"),
            tolerance: 1e-10,
            method_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub runs: usize,
    pub max_p_deviation: f64,
    pub max_density_deviation: f64,
    pub max_method_deviation: f64,
    pub passed: bool,
}

/// Runs `spec.cases` random molecule pairs, each coherent and with dipolar relaxation.
pub fn run_oracle_suite(spec: &OracleSpec) -> Result<OracleReport> {
    if spec.max_spins < 2 || 2 * spec.max_spins > DEFAULT_ORACLE_CAP {
        return Err(SpinError::InvalidArgument(format!(
            "max_spins must lie in 2..={} so both molecules fit the direct-evolution cap",
            DEFAULT_ORACLE_CAP / 2
        )));
    }
    if spec.cases == 0 {
        return Err(SpinError::InvalidArgument("oracle suite needs at least one case".into()));
    }
    let mut report = OracleReport {
        runs: 0,
        max_p_deviation: 0.0,
        max_density_deviation: 0.0,
        max_method_deviation: 0.0,
        passed: false,
    };
    for case in 0..spec.cases {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, 0, case));
        let na = rng.random_range(2..=spec.max_spins);
        let nb = rng.random_range(2..=spec.max_spins);
        let field = if rng.random_bool(0.5) { 0.0 } else { 50e-6 };
        let a = random_molecule(na, rng.random(), field)?;
        let b = random_molecule(nb, rng.random(), field)?;
        let pair = (rng.random_range(0..na), rng.random_range(0..nb));
        for opts in [DynamicsOptions::coherent(), DynamicsOptions::with_relaxation(&[Mechanism::Dipolar])] {
            let direct = joint_singlet_probability_direct(&a, &b, pair, &spec.grid, &opts)?;
            let model_a = MoleculeModel::new(&a, &opts)?;
            let ma = model_a.correlation_tensor(pair.0, pair.0, &spec.grid)?;
            let mb = MoleculeModel::new(&b, &opts)?.correlation_tensor(pair.1, pair.1, &spec.grid)?;
            let p = singlet_probability_factorized(&ma, &mb)?;
            for (x, y) in p.iter().zip(&direct.p) {
                report.max_p_deviation = report.max_p_deviation.max((x - y).abs());
            }
            let rho = reduced_pair_density(&ma, &mb)?;
            for (x, y) in rho.rho.iter().zip(&direct.pair_density) {
                let d = (x - y).iter().map(|z| z.norm()).fold(0.0, f64::max);
                report.max_density_deviation = report.max_density_deviation.max(d);
            }
            let krylov = DynamicsOptions {
                method: PropagationMethod::KrylovExpm,
                krylov_tol: 1e-12,
                ..opts.clone()
            };
            let mk = MoleculeModel::new(&a, &krylov)?.correlation_tensor(pair.0, pair.0, &spec.grid)?;
            for (x, y) in ma.m.iter().zip(&mk.m) {
                report.max_method_deviation = report.max_method_deviation.max((x - y).abs().max());
            }
            report.runs += 1;
        }
    }
    report.passed = report.max_p_deviation <= spec.tolerance
        && report.max_density_deviation <= spec.tolerance
        && report.max_method_deviation <= spec.method_tolerance;
    Ok(report)
}
