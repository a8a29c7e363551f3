//! Matrix-exponential action `exp(t A) v` for sparse real `A` by Arnoldi projection.

use crate::error::{Result, SpinError};
use crate::sparse::CsrMatrix;
use ndarray::{s, Array1, Array2};

pub const DEFAULT_KRYLOV_DIM: usize = 30;

/// Dense `exp(A)` by scaling and squaring with a truncated Taylor series.
pub fn expm_dense(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let norm1 = (0..n).map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm1 > 0.5 { (norm1 / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut result = Array2::<f64>::eye(n);
    let mut term = Array2::<f64>::eye(n);
    for k in 1..=30 {
        term = term.dot(&scaled) / k as f64;
        result += &term;
        let tn = term.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if tn < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.dot(&result);
    }
    result
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Counters from one call of [`expm_multiply`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KrylovStats {
    pub substeps: usize,
    pub matvecs: usize,
}

/// Computes `exp(t A) v`.
///
/// Each substep builds an Arnoldi basis of at most `m_max` vectors and accepts
/// the step once the a-posteriori estimate `beta h_{m+1,m} |e_m^T exp(tau H_m) e_1|`
/// is below `tol * beta`; otherwise the substep length is reduced.
pub fn expm_multiply(a: &CsrMatrix<f64>, v: &[f64], t: f64, tol: f64, m_max: usize) -> Result<(Vec<f64>, KrylovStats)> {
    let n = a.nrows();
    if a.ncols() != n || v.len() != n {
        return Err(SpinError::Dimension(format!("expm action on {}x{} with vector {}", n, a.ncols(), v.len())));
    }
    let mut stats = KrylovStats::default();
    let mut w = v.to_vec();
    if t == 0.0 || n == 0 {
        return Ok((w, stats));
    }
    let anorm = (0..n).map(|r| a.row(r).map(|(_, x)| x.abs()).sum::<f64>()).fold(0.0, f64::max);
    if anorm == 0.0 {
        return Ok((w, stats));
    }
    let m_max = m_max.clamp(1, n);
    let mut done = 0.0;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m_max + 1);
    let mut scratch = vec![0.0; n];
    while done < t {
        let remaining = t - done;
        let beta = norm(&w);
        if beta == 0.0 {
            break;
        }
        basis.clear();
        basis.push(w.iter().map(|x| x / beta).collect());
        let mut h = Array2::<f64>::zeros((m_max + 1, m_max));
        let mut m = m_max;
        let mut happy = false;
        let mut h_next = 0.0;
        for j in 0..m_max {
            a.matvec_into(&basis[j], &mut scratch);
            stats.matvecs += 1;
            // modified Gram-Schmidt, applied twice for stability
            for _ in 0..2 {
                for (i, b) in basis.iter().enumerate() {
                    let c = dot(&scratch, b);
                    h[[i, j]] += c;
                    for (s, bv) in scratch.iter_mut().zip(b) {
                        *s -= c * bv;
                    }
                }
            }
            let hn = norm(&scratch);
            if hn <= 1e-14 * anorm {
                m = j + 1;
                happy = true;
                break;
            }
            h[[j + 1, j]] = hn;
            h_next = hn;
            basis.push(scratch.iter().map(|x| x / hn).collect());
            // stop early once the whole remaining interval is already resolved
            if j + 1 < m_max && (j + 1) % 4 == 0 {
                let hm = h.slice(s![..j + 1, ..j + 1]).to_owned();
                let e = expm_dense(&(hm * remaining));
                if beta * hn * e[[j, 0]].abs() <= tol * beta {
                    m = j + 1;
                    break;
                }
            }
        }
        let hm = h.slice(s![..m, ..m]).to_owned();
        let mut tau = remaining;
        let e = loop {
            let e = expm_dense(&(&hm * tau));
            if happy {
                break e;
            }
            let err = beta * h_next * e[[m - 1, 0]].abs();
            if err <= tol * beta {
                break e;
            }
            // error scales roughly as tau^m
            let shrink = 0.9 * (tol / err).powf(1.0 / m as f64);
            tau *= shrink.clamp(0.1, 0.5);
            if tau < remaining * 1e-12 {
                return Err(SpinError::Numerical("Krylov step size underflow".into()));
            }
        };
        let coef: Array1<f64> = e.column(0).to_owned() * beta;
        w.iter_mut().for_each(|x| *x = 0.0);
        for (c, b) in coef.iter().zip(&basis) {
            for (x, bv) in w.iter_mut().zip(b) {
                *x += c * bv;
            }
        }
        done = if tau == remaining { t } else { done + tau };
        stats.substeps += 1;
    }
    Ok((w, stats))
}

/// `exp(t A) v` at each of the increasing `times`, stepping between samples.
pub fn expm_multiply_grid(a: &CsrMatrix<f64>, v: &[f64], times: &[f64], tol: f64, m_max: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(times.len());
    let mut current = v.to_vec();
    let mut t_prev = 0.0;
    for &t in times {
        let dt = t - t_prev;
        if dt < 0.0 {
            return Err(SpinError::InvalidArgument("times must be nondecreasing from 0".into()));
        }
        if dt > 0.0 {
            current = expm_multiply(a, &current, dt, tol, m_max)?.0;
        }
        out.push(current.clone());
        t_prev = t;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn expm_of_rotation_generator() {
        let theta = 2.3;
        let a = Array2::from_shape_vec((2, 2), vec![0.0, -theta, theta, 0.0]).unwrap();
        let e = expm_dense(&a);
        assert!((e[[0, 0]] - theta.cos()).abs() < 1e-14);
        assert!((e[[1, 0]] - theta.sin()).abs() < 1e-14);
    }

    #[test]
    fn expm_diagonal_large_norm() {
        let a = Array2::from_diag(&Array1::from(vec![-30.0, 2.0, 0.0]));
        let e = expm_dense(&a);
        assert!((e[[0, 0]] / (-30f64).exp() - 1.0).abs() < 1e-12);
        assert!((e[[1, 1]] / 2f64.exp() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn krylov_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let mut trip = Vec::new();
        for i in 0..n {
            for j in 0..i {
                if rng.random_bool(0.2) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    trip.push((i, j, v));
                    trip.push((j, i, -v));
                }
            }
            trip.push((i, i, -rng.random_range(0.0..0.3)));
        }
        let a = CsrMatrix::from_triplets(n, n, trip);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = 7.5;
        let (got, stats) = expm_multiply(&a, &v, t, 1e-12, 30).unwrap();
        let e = expm_dense(&(a.to_dense() * t));
        let want = e.dot(&Array1::from(v));
        let err = got.iter().zip(want.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "err {err} stats {stats:?}");
    }

    #[test]
    fn zero_generator_is_identity() {
        let a = CsrMatrix::<f64>::zeros(4, 4);
        let v = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(expm_multiply(&a, &v, 10.0, 1e-10, 30).unwrap().0, v);
    }
}
