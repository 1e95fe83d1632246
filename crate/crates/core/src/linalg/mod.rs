//! Linear algebra: LAPACK bindings, sparse containers, and complex vector
//! helpers. Dense paths cover full or windowed Hermitian eigensolves and the
//! small solves used by compressed-operator computations.

pub mod lapack;
pub mod sparse;

pub use sparse::{CsrMatrix, HermBuilder, HermOp, LinOp};

use num_complex::Complex64;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// ⟨x, y⟩ with the left argument conjugated (physics convention).
pub fn dot(x: &[C64], y: &[C64]) -> C64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm(x: &[C64]) -> f64 {
    x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// y += alpha * x
pub fn axpy(alpha: C64, x: &[C64], y: &mut [C64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: C64, x: &mut [C64]) {
    for xi in x {
        *xi *= alpha;
    }
}

pub fn normalize(x: &mut [C64]) -> f64 {
    let n = norm(x);
    if n > 0.0 {
        scale(C64::new(1.0 / n, 0.0), x);
    }
    n
}

/// Remove from `x` its components along each (orthonormal) column of `basis`.
pub fn orthogonalize_against(basis: &[Vec<C64>], x: &mut [C64]) {
    for b in basis {
        let c = dot(b, x);
        axpy(-c, b, x);
    }
}

/// Naive column-major product C = A B for small dense matrices.
/// A is m x k, B is k x n.
pub fn dense_mul(a: &[C64], b: &[C64], m: usize, k: usize, n: usize) -> Vec<C64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![ZERO; m * n];
    for j in 0..n {
        for l in 0..k {
            let blj = b[l + j * k];
            if blj == ZERO {
                continue;
            }
            for i in 0..m {
                c[i + j * m] += a[i + l * m] * blj;
            }
        }
    }
    c
}

/// Conjugate transpose of a column-major m x n matrix.
pub fn dense_adjoint(a: &[C64], m: usize, n: usize) -> Vec<C64> {
    let mut out = vec![ZERO; m * n];
    for j in 0..n {
        for i in 0..m {
            out[j + i * n] = a[i + j * m].conj();
        }
    }
    out
}

/// Spectral norm of a column-major m x n matrix via the eigenvalues of A*A.
pub fn dense_op_norm(a: &[C64], m: usize, n: usize) -> crate::error::Result<f64> {
    let adj = dense_adjoint(a, m, n);
    let mut gram = dense_mul(&adj, a, n, m, n);
    let evs = lapack::heev_full(&mut gram, n)?;
    Ok(evs.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}
