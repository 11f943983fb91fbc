//! Complex banded LU without pivoting.
//!
//! Used for the Crank–Nicolson matrices `I ∓ i(dt/2)H` with `H` real
//! symmetric: their Hermitian part is the identity, so elimination without
//! pivoting is stable and fill stays inside the band.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::BandedOperator;

const PIVOT_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    p: usize,
    // row-major band, slot j - i + p
    lu: Vec<Complex64>,
}

impl BandedLu {
    /// Factorizes `shift·I + scale·A`.
    pub fn factor_shifted(a: &BandedOperator, shift: Complex64, scale: Complex64) -> Result<Self> {
        let n = a.rows();
        let p = a.bandwidth();
        let w = 2 * p + 1;
        let mut lu = vec![Complex64::new(0.0, 0.0); n * w];
        for i in 0..n {
            for j in a.row_span(i) {
                let mut v = scale * a.entry(i, j);
                if i == j {
                    v += shift;
                }
                lu[i * w + j + p - i] = v;
            }
        }
        let idx = |i: usize, j: usize| i * w + j + p - i;
        for k in 0..n {
            let pivot = lu[idx(k, k)];
            if pivot.norm() < PIVOT_FLOOR || !pivot.is_finite() {
                return Err(Error::SingularSystem {
                    index: k,
                    magnitude: pivot.norm(),
                });
            }
            let end = (k + p + 1).min(n);
            for i in k + 1..end {
                let l = lu[idx(i, k)] / pivot;
                lu[idx(i, k)] = l;
                for j in k + 1..end {
                    let ukj = lu[idx(k, j)];
                    lu[idx(i, j)] -= l * ukj;
                }
            }
        }
        Ok(Self { n, p, lu })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Overwrites `b` with `A⁻¹ b`.
    #[allow(clippy::needless_range_loop)]
    pub fn solve_in_place(&self, b: &mut [Complex64]) {
        assert_eq!(b.len(), self.n);
        let (n, p) = (self.n, self.p);
        let w = 2 * p + 1;
        let idx = |i: usize, j: usize| i * w + j + p - i;
        for i in 0..n {
            let mut s = b[i];
            for j in i.saturating_sub(p)..i {
                s -= self.lu[idx(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..(i + p + 1).min(n) {
                s -= self.lu[idx(i, j)] * b[j];
            }
            b[i] = s / self.lu[idx(i, i)];
        }
    }

    /// Overwrites `b` with `conj(A)⁻¹ b`, reusing the factors of `A`.
    pub fn solve_conj_in_place(&self, b: &mut [Complex64]) {
        for z in b.iter_mut() {
            *z = z.conj();
        }
        self.solve_in_place(b);
        for z in b.iter_mut() {
            *z = z.conj();
        }
    }
}
