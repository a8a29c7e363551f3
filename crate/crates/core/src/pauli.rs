//! Pauli-string algebra and the orthonormal Pauli basis of Liouville space.
//!
//! A string on `n` sites is stored in symplectic form `(x, z)`: site `k` owns
//! bit `n - 1 - k`, so site 0 is the slowest-varying tensor factor. The
//! string represents `i^{|x & z|} X^x Z^z`, which makes every string Hermitian
//! (`Y = iXZ` on each site).
//!
//! Liouville-space vectors are coefficients in the basis `P_k / sqrt(2^n)`,
//! indexed by `k = sum_j code_j 4^(n-1-j)` with codes `I=0, X=1, Y=2, Z=3`.
//! The basis is orthonormal under the Hilbert-Schmidt product, and the
//! coefficients of a Hermitian operator are real.

use crate::spin::Axis;
use num_complex::Complex64;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PauliString {
    pub x: u32,
    pub z: u32,
}

const PHASES: [Complex64; 4] = [
    Complex64::new(1.0, 0.0),
    Complex64::new(0.0, 1.0),
    Complex64::new(-1.0, 0.0),
    Complex64::new(0.0, -1.0),
];

/// `i^k` for `k` taken mod 4.
pub fn i_pow(k: u32) -> Complex64 {
    PHASES[(k & 3) as usize]
}

impl PauliString {
    pub const IDENTITY: PauliString = PauliString { x: 0, z: 0 };

    pub fn single(n: usize, site: usize, axis: Axis) -> Self {
        let bit = 1u32 << (n - 1 - site);
        match axis {
            Axis::X => PauliString { x: bit, z: 0 },
            Axis::Y => PauliString { x: bit, z: bit },
            Axis::Z => PauliString { x: 0, z: bit },
        }
    }

    fn y_count(self) -> u32 {
        (self.x & self.z).count_ones()
    }

    /// Returns `(k, R)` with `self * other = i^k R`.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: PauliString) -> (u32, PauliString) {
        let r = PauliString {
            x: self.x ^ other.x,
            z: self.z ^ other.z,
        };
        let k = self.y_count() + other.y_count() + 2 * (self.z & other.x).count_ones() + 4 - (r.y_count() & 3);
        (k & 3, r)
    }

    pub fn commutes_with(self, other: PauliString) -> bool {
        ((self.x & other.z).count_ones() + (self.z & other.x).count_ones()).is_multiple_of(2)
    }

    /// Column of the single nonzero in row `r`, and its value.
    pub fn row_entry(self, r: usize) -> (usize, Complex64) {
        // P[c ^ x, c] = i^{|xz|} (-1)^{|z & c|}
        let c = r ^ self.x as usize;
        let sign = if (self.z as usize & c).count_ones().is_multiple_of(2) { 0 } else { 2 };
        (c, i_pow(self.y_count() + sign))
    }

    pub fn weight(self) -> u32 {
        (self.x | self.z).count_ones()
    }

    pub fn to_index(self, n: usize) -> usize {
        let mut idx = 0usize;
        for site in 0..n {
            let bit = n - 1 - site;
            let code = match ((self.x >> bit) & 1, (self.z >> bit) & 1) {
                (0, 0) => 0,
                (1, 0) => 1,
                (1, 1) => 2,
                _ => 3,
            };
            idx = idx * 4 + code;
        }
        idx
    }

    pub fn from_index(mut idx: usize, n: usize) -> Self {
        let mut s = PauliString::IDENTITY;
        for site in (0..n).rev() {
            let bit = 1u32 << (n - 1 - site);
            match idx & 3 {
                1 => s.x |= bit,
                2 => {
                    s.x |= bit;
                    s.z |= bit
                }
                3 => s.z |= bit,
                _ => {}
            }
            idx >>= 2;
        }
        s
    }
}

/// Index tables between Liouville indices and symplectic strings for `n` sites.
pub struct PauliBasis {
    n: usize,
    strings: Vec<PauliString>,
    index_of: Vec<u32>,
}

impl PauliBasis {
    pub fn new(n: usize) -> Self {
        let dim = 1usize << (2 * n);
        let strings: Vec<PauliString> = (0..dim).map(|k| PauliString::from_index(k, n)).collect();
        let mut index_of = vec![0u32; dim];
        for (k, s) in strings.iter().enumerate() {
            index_of[((s.x as usize) << n) | s.z as usize] = k as u32;
        }
        PauliBasis { n, strings, index_of }
    }

    pub fn n_spins(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.strings.len()
    }

    pub fn string(&self, k: usize) -> PauliString {
        self.strings[k]
    }

    pub fn index(&self, s: PauliString) -> usize {
        self.index_of[((s.x as usize) << self.n) | s.z as usize] as usize
    }

    pub fn strings(&self) -> &[PauliString] {
        &self.strings
    }
}
