//! Singlet projector, pair densities, concurrence and scalar series metrics.

use crate::dynamics::CorrelationTensor;
use crate::error::{Result, SpinError};
use crate::linalg::eigh_hermitian;
use crate::spin::{dot_coupling_op, Operator};
use ndarray::{array, Array2};
use ndarray_linalg::{Eig, Eigh, UPLO};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Tolerance used when checking that a 4x4 matrix is a density operator.
pub const DENSITY_TOL: f64 = 1e-8;

/// `|S><S|` on `(site_a, site_b)`, identity on every other spin.
pub fn singlet_projector(n_total: usize, site_a: usize, site_b: usize) -> Result<Operator> {
    let dot = dot_coupling_op(n_total, site_a, site_b)?;
    Operator::identity(n_total).scale(0.25).sub(&dot)
}

fn pauli2() -> [Array2<Complex64>; 3] {
    let c = |re: f64, im: f64| Complex64::new(re, im);
    [
        array![[c(0.0, 0.0), c(1.0, 0.0)], [c(1.0, 0.0), c(0.0, 0.0)]],
        array![[c(0.0, 0.0), c(0.0, -1.0)], [c(0.0, 1.0), c(0.0, 0.0)]],
        array![[c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(-1.0, 0.0)]],
    ]
}

fn kron2(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
    Array2::from_shape_fn((4, 4), |(i, j)| a[[i / 2, j / 2]] * b[[i % 2, j % 2]])
}

/// Time series of the 4x4 reduced density of one cross-molecule spin pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDensity {
    pub times: Vec<f64>,
    pub rho: Vec<Array2<Complex64>>,
}

impl PairDensity {
    pub fn concurrence(&self) -> Result<Vec<f64>> {
        self.rho.iter().map(concurrence).collect()
    }
}

/// `rho(t) = 1/4 [1 - sum_a (sum_b mA_ab sigma_b) (x) (sum_c mB_ac sigma_c)]`.
pub fn reduced_pair_density(ma: &CorrelationTensor, mb: &CorrelationTensor) -> Result<PairDensity> {
    if ma.times != mb.times || ma.m.len() != mb.m.len() {
        return Err(SpinError::GridMismatch);
    }
    let sig = pauli2();
    let mixed = |m: &nalgebra::Matrix3<f64>, a: usize| {
        let mut out = Array2::<Complex64>::zeros((2, 2));
        for (b, s) in sig.iter().enumerate() {
            out = out + s * Complex64::new(m[(a, b)], 0.0);
        }
        out
    };
    let rho = ma
        .m
        .iter()
        .zip(&mb.m)
        .map(|(a, b)| {
            let mut r = Array2::<Complex64>::eye(4);
            for axis in 0..3 {
                r = r - kron2(&mixed(a, axis), &mixed(b, axis));
            }
            r * Complex64::new(0.25, 0.0)
        })
        .collect();
    Ok(PairDensity {
        times: ma.times.clone(),
        rho,
    })
}

/// Checks trace, Hermiticity and positivity of a two-qubit density matrix.
pub fn validate_density(rho: &Array2<Complex64>) -> Result<()> {
    if rho.dim() != (4, 4) {
        return Err(SpinError::NotADensity(format!("expected 4x4, got {:?}", rho.dim())));
    }
    let tr: Complex64 = rho.diag().sum();
    if (tr - 1.0).norm() > DENSITY_TOL {
        return Err(SpinError::NotADensity(format!("trace {tr}")));
    }
    let herm = rho
        .iter()
        .zip(rho.t().iter())
        .map(|(a, b)| (a - b.conj()).norm())
        .fold(0.0, f64::max);
    if herm > DENSITY_TOL {
        return Err(SpinError::NotADensity(format!("anti-Hermitian part {herm:e}")));
    }
    let (w, _) = rho.eigh(UPLO::Lower)?;
    let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -DENSITY_TOL {
        return Err(SpinError::NotADensity(format!("negative eigenvalue {min:e}")));
    }
    Ok(())
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConcurrenceMode {
    /// Square roots of the eigenvalues of `rho (Y(x)Y) rho* (Y(x)Y)`.
    #[default]
    Wootters,
    /// Eigenvalues of `rho (Y(x)Y) rho (Y(x)Y)` taken as they are, without conjugation or roots.
    Literal,
}

fn spin_flip() -> Array2<Complex64> {
    let y = &pauli2()[1];
    kron2(y, y)
}

/// Wootters concurrence of a two-qubit density matrix.
pub fn concurrence(rho: &Array2<Complex64>) -> Result<f64> {
    concurrence_with(rho, ConcurrenceMode::Wootters)
}

pub fn concurrence_with(rho: &Array2<Complex64>, mode: ConcurrenceMode) -> Result<f64> {
    validate_density(rho)?;
    let yy = spin_flip();
    let mut lambdas: Vec<f64> = match mode {
        ConcurrenceMode::Wootters => {
            // eigenvalues of sqrt(rho) rho~ sqrt(rho), which share the spectrum of rho rho~
            let (w, v) = eigh_hermitian(rho)?;
            let root = Array2::from_diag(&w.mapv(|x| Complex64::new(x.max(0.0).sqrt(), 0.0)));
            let vh = v.t().mapv(|x| x.conj());
            let sqrt_rho = v.dot(&root).dot(&vh);
            let tilde = yy.dot(&rho.mapv(|x| x.conj())).dot(&yy);
            let m = sqrt_rho.dot(&tilde).dot(&sqrt_rho);
            let m = (&m + &m.t().mapv(|x| x.conj())) * Complex64::new(0.5, 0.0);
            let (mu, _) = m.eigh(UPLO::Lower)?;
            mu.iter().map(|&x| x.max(0.0).sqrt()).collect()
        }
        ConcurrenceMode::Literal => {
            let r = rho.dot(&yy).dot(rho).dot(&yy);
            let (mu, _) = r.eig()?;
            mu.iter().map(|x| x.re).collect()
        }
    };
    lambdas.sort_by(|a, b| b.total_cmp(a));
    Ok((lambdas[0] - lambdas[1] - lambdas[2] - lambdas[3]).clamp(0.0, 1.0))
}

/// `k * integral_0^T max(p - 1/2, 0) exp(-k t) dt` by the trapezoid rule on the series grid.
pub fn entanglement_yield(times: &[f64], p: &[f64], k_per_s: f64, horizon_s: f64) -> Result<f64> {
    if times.len() != p.len() {
        return Err(SpinError::InvalidArgument("time and probability columns differ in length".into()));
    }
    if !(k_per_s > 0.0) {
        return Err(SpinError::InvalidArgument(format!("yield rate must be positive, got {k_per_s}")));
    }
    let end = times.last().copied().unwrap_or(0.0);
    if times.is_empty() || end < horizon_s * (1.0 - 1e-12) {
        return Err(SpinError::ShortSeries {
            len: times.len(),
            end,
            horizon: horizon_s,
        });
    }
    let f = |t: f64, p: f64| (p - 0.5).max(0.0) * (-k_per_s * t).exp();
    let mut total = 0.0;
    for i in 0..times.len() - 1 {
        let (t0, t1) = (times[i], times[i + 1]);
        if t0 >= horizon_s {
            break;
        }
        let (p0, mut p1, mut t1c) = (p[i], p[i + 1], t1);
        if t1 > horizon_s {
            p1 = p0 + (p1 - p0) * (horizon_s - t0) / (t1 - t0);
            t1c = horizon_s;
        }
        total += 0.5 * (t1c - t0) * (f(t0, p0) + f(t1c, p1));
    }
    Ok(k_per_s * total)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    /// First downward crossing of the threshold; the first sample time if the series starts below it.
    pub first_below_s: Option<f64>,
    /// Last time the series is at or above the threshold.
    pub last_above_s: Option<f64>,
    pub threshold: f64,
}

fn interpolate_down(t0: f64, t1: f64, p0: f64, p1: f64, thr: f64) -> f64 {
    if p0 == p1 {
        return t0;
    }
    t0 + (p0 - thr) / (p0 - p1) * (t1 - t0)
}

/// First and last threshold crossings, linearly interpolated between samples.
pub fn threshold_crossings(times: &[f64], p: &[f64], threshold: f64) -> Result<CrossingReport> {
    if times.is_empty() || times.len() != p.len() {
        return Err(SpinError::InvalidArgument("crossings need a nonempty series with matching columns".into()));
    }
    let n = p.len();
    let first_below_s = if p[0] < threshold {
        Some(times[0])
    } else {
        (0..n - 1)
            .find(|&i| p[i] >= threshold && p[i + 1] < threshold)
            .map(|i| interpolate_down(times[i], times[i + 1], p[i], p[i + 1], threshold))
    };
    let last_above_s = p.iter().rposition(|&x| x >= threshold).map(|i| {
        if i == n - 1 {
            times[i]
        } else {
            interpolate_down(times[i], times[i + 1], p[i], p[i + 1], threshold)
        }
    });
    Ok(CrossingReport {
        first_below_s,
        last_above_s,
        threshold,
    })
}

/// Upper bound `(n^4 - 2 n^3 + 7 n^2 - 6 n) / 8` on the number of distinct oscillation frequencies.
pub fn unique_frequency_bound(n_levels: u64) -> Result<u128> {
    if n_levels < 1 {
        return Err(SpinError::InvalidArgument("level count must be at least 1".into()));
    }
    let n = n_levels as u128;
    let num = n.pow(4) + 7 * n.pow(2) - 2 * n.pow(3) - 6 * n;
    if !num.is_multiple_of(8) {
        return Err(SpinError::Numerical(format!("frequency bound numerator {num} not divisible by 8")));
    }
    Ok(num / 8)
}

/// Number of eigenvalue clusters of a Hamiltonian (rad/s), splitting at gaps above `tol_hz`.
pub fn count_distinct_levels(h: &Operator, tol_hz: f64) -> Result<usize> {
    if h.hermiticity_error() > 1e-10 {
        return Err(SpinError::InvalidArgument("level counting needs a Hermitian operator".into()));
    }
    let (w, _) = h.to_dense().eigh(UPLO::Lower)?;
    let mut hz: Vec<f64> = w.iter().map(|e| e / TWO_PI).collect();
    hz.sort_by(f64::total_cmp);
    Ok(1 + hz.windows(2).filter(|p| p[1] - p[0] > tol_hz).count())
}

/// One-dimensional traversal time `L^2 / (2 D)` in seconds.
pub fn diffusion_traversal_time(d_m2_s: f64, length_m: f64) -> Result<f64> {
    if !(d_m2_s > 0.0) {
        return Err(SpinError::InvalidArgument(format!("diffusion constant must be positive, got {d_m2_s}")));
    }
    if !(length_m >= 0.0) {
        return Err(SpinError::InvalidArgument(format!("length must be nonnegative, got {length_m}")));
    }
    Ok(length_m * length_m / (2.0 * d_m2_s))
}
