//! Small row-major matrix products used by the convolution and linear kernels.

use crate::tensor::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_ip * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn gemm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    for o in 0..m {
        let b_row = &b[o * n..(o + 1) * n];
        for p in 0..k {
            let a_op = a[o * k + p];
            if a_op == F::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + a_op * bv;
            }
        }
    }
}

/// Transpose of a `rows×cols` row-major matrix.
pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
