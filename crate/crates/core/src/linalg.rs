//! Complex dense matrix helpers with an instrumented multiply counter.
//!
//! All block-level products in the Green's function solvers go through
//! [`mat_mul`] so the scalar multiply volume of a formulation can be measured
//! and compared against alternatives.

use nalgebra::DMatrix;
use num_complex::Complex64;
use std::sync::atomic::{AtomicU64, Ordering};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<Complex64>;

/// Accumulated complex scalar multiply volume (n*m*k per product, n^3 per inverse).
static MUL_COUNT: AtomicU64 = AtomicU64::new(0);

pub fn reset_mul_count() {
    MUL_COUNT.store(0, Ordering::Relaxed);
}

pub fn mul_count() -> u64 {
    MUL_COUNT.load(Ordering::Relaxed)
}

/// Counted matrix product.
pub fn mat_mul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    debug_assert_eq!(a.ncols(), b.nrows());
    MUL_COUNT.fetch_add(
        (a.nrows() * a.ncols() * b.ncols()) as u64,
        Ordering::Relaxed,
    );
    a * b
}

/// Counted matrix inverse. Returns `None` on a singular pivot.
pub fn mat_inv(a: &CMatrix) -> Option<CMatrix> {
    let n = a.nrows() as u64;
    MUL_COUNT.fetch_add(n * n * n, Ordering::Relaxed);
    a.clone().try_inverse()
}

pub fn adjoint(a: &CMatrix) -> CMatrix {
    a.adjoint()
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn zeros(n: usize, m: usize) -> CMatrix {
    CMatrix::zeros(n, m)
}

/// Frobenius norm.
pub fn fro_norm(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Max relative elementwise deviation between two matrices, with floor `eps`.
pub fn max_rel_diff(a: &CMatrix, b: &CMatrix, eps: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm() / (y.norm() + eps))
        .fold(0.0, f64::max)
}

/// Hermiticity defect |A - A^dag| in Frobenius norm.
pub fn hermiticity_defect(a: &CMatrix) -> f64 {
    fro_norm(&(a - a.adjoint()))
}

/// Minimum eigenvalue of a Hermitian matrix (symmetrized before the solve).
pub fn min_eigenvalue_hermitian(a: &CMatrix) -> f64 {
    let sym = (a + a.adjoint()).scale(0.5);
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_counter_accumulates_volume() {
        reset_mul_count();
        let a = CMatrix::identity(3, 3);
        let b = CMatrix::identity(3, 3);
        let _ = mat_mul(&a, &b);
        assert_eq!(mul_count(), 27);
        let _ = mat_inv(&a);
        assert_eq!(mul_count(), 54);
    }

    #[test]
    fn inverse_roundtrip() {
        let mut a = CMatrix::identity(4, 4);
        a[(0, 1)] = C64::new(0.3, -0.2);
        a[(2, 3)] = C64::new(-1.1, 0.4);
        let inv = mat_inv(&a).unwrap();
        let prod = mat_mul(&a, &inv);
        assert!(fro_norm(&(prod - CMatrix::identity(4, 4))) < 1e-12);
    }
}
