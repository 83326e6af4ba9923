//! Row-major matrix multiplication kernels.
//!
//! Three access patterns cover everything the network needs:
//! `C = A·B` (forward), `C = Aᵀ·B` (filter gradients) and `C = A·Bᵀ`
//! (input gradients). All use an i-k-j loop order so the innermost loop
//! walks contiguous memory with a fused multiply-add, which the compiler
//! auto-vectorizes; no explicit SIMD or threading.

use crate::tensor::Scalar;

/// `C (m x n) = A (m x k) · B (k x n)`, all row-major.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    let mut c = vec![S::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = aik.mul_add(bv, *cv);
            }
        }
    }
    c
}

/// `C (k x n) = Aᵀ·B` with `A (m x k)`, `B (m x n)`, all row-major.
///
/// This is the filter-gradient shape: patches-transposed times upstream
/// cotangent. Implemented as rank-1 updates so both operands stream
/// contiguously.
pub fn matmul_at_b<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), m * n, "rhs length");
    let mut c = vec![S::ZERO; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = aik.mul_add(bv, *cv);
            }
        }
    }
    c
}

/// `C (m x k) = A·Bᵀ` with `A (m x n)`, `B (k x n)`, all row-major.
///
/// Used for input gradients (`dY · Fᵀ`). `B` is transposed once up front so
/// the bulk of the work runs through the contiguous [`matmul`] kernel.
pub fn matmul_a_bt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    assert_eq!(a.len(), m * n, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    let bt = transpose(b, k, n);
    matmul(a, &bt, m, n, k)
}

/// Out-of-place transpose of a row-major `rows x cols` matrix.
pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    assert_eq!(x.len(), rows * cols);
    let mut t = vec![S::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}
