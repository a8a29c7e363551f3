//! Dense eigensolver helpers.

use crate::error::{Result, SpinError};
use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64;

fn residual(a: &Array2<Complex64>, w: &Array1<f64>, v: &Array2<Complex64>) -> f64 {
    let av = a.dot(v);
    let mut worst = 0.0f64;
    for (j, &l) in w.iter().enumerate() {
        for i in 0..a.nrows() {
            worst = worst.max((av[[i, j]] - v[[i, j]] * l).norm());
        }
    }
    worst
}

/// Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a Hermitian matrix.
///
/// For row-major complex input the backend returns the eigenvectors of the
/// conjugate matrix; the residual decides which of the two sets is returned.
pub fn eigh_hermitian(a: &Array2<Complex64>) -> Result<(Array1<f64>, Array2<Complex64>)> {
    let (w, v) = a.eigh(UPLO::Lower)?;
    let scale = a.iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let direct = residual(a, &w, &v);
    if direct <= 1e-10 * scale {
        return Ok((w, v));
    }
    let vc = v.mapv(|x| x.conj());
    let conj = residual(a, &w, &vc);
    if conj <= 1e-10 * scale {
        return Ok((w, vc));
    }
    Err(SpinError::Numerical(format!(
        "Hermitian eigensolver residual {:.3e}",
        direct.min(conj) / scale
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_complex_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 4, 7] {
            let b = Array2::from_shape_fn((n, n), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let a = &b + &b.t().mapv(|x| x.conj());
            let (w, v) = eigh_hermitian(&a).unwrap();
            let d = Array2::from_diag(&w.mapv(|x| Complex64::new(x, 0.0)));
            let back = v.dot(&d).dot(&v.t().mapv(|x| x.conj()));
            let err = (&back - &a).iter().map(|x| x.norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "n = {n}: {err}");
        }
    }
}
