//! Deterministic dense kernels.
//!
//! Reduction order contract: every output element `C[i,j]` accumulates its
//! `k` products in ascending-`p` order with a single scalar accumulation
//! chain. Row-parallelism never splits a reduction, so results are
//! bitwise identical whatever the thread count.

use rayon::prelude::*;

use super::scalar::Scalar;

/// Below this many multiply-accumulates, threading overhead dominates.
const PAR_THRESHOLD: usize = 262_144;

/// C += A(m x k) * B(k x n), row-major.
pub fn matmul_add<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "matmul: lhs buffer mismatch");
    assert_eq!(b.len(), k * n, "matmul: rhs buffer mismatch");
    assert_eq!(c.len(), m * n, "matmul: out buffer mismatch");
    let row = |c_row: &mut [F], a_row: &[F]| {
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj = *cj + aip * bj;
            }
        }
    };
    if m * k * n < PAR_THRESHOLD || m < 2 {
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            row(c_row, &a[i * k..(i + 1) * k]);
        }
    } else {
        c.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(c_row, &a[i * k..(i + 1) * k]));
    }
}

/// C = A(m x k) * B(k x n).
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    matmul_add(&mut c, a, b, m, k, n);
    c
}

/// Row-major transpose of an `rows x cols` matrix.
pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    assert_eq!(a.len(), rows * cols, "transpose: buffer mismatch");
    let mut out = vec![F::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// C += A(m x k) * B(n x k)^T. Implemented as a transpose feeding the
/// streaming kernel; the per-element reduction order is unchanged.
pub fn matmul_bt_add<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_add(c, a, &bt, m, k, n);
}

/// C += A(k x m)^T * B(k x n).
pub fn matmul_at_add<F: Scalar>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    let at = transpose(a, k, m);
    matmul_add(c, &at, b, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_returns_operand() {
        // I3 * A == A for any 3x3 A.
        let identity = [1.0f64, 0., 0., 0., 1., 0., 0., 0., 1.];
        let a = [2.0f64, -1., 0.5, 3., 7., -2., 0., 4., 9.];
        assert_eq!(matmul(&identity, &a, 3, 3, 3), a.to_vec());
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        // Oracle: textbook i,j,p triple loop, same ascending-p order.
        let m = 5;
        let k = 7;
        let n = 4;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut oracle = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                oracle[i * n + j] = s;
            }
        }
        assert_eq!(matmul(&a, &b, m, k, n), oracle);
    }

    #[test]
    fn parallel_and_serial_agree_bitwise() {
        // Large enough to cross PAR_THRESHOLD.
        let m = 96;
        let k = 64;
        let n = 64;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 2654435761 % 1000) as f32) / 997.0 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 40503 % 1000) as f32) / 991.0 - 0.5).collect();
        let par = matmul(&a, &b, m, k, n);
        let mut serial = vec![0.0f32; m * n];
        for (i, c_row) in serial.chunks_exact_mut(n).enumerate() {
            for p in 0..k {
                let aip = a[i * k + p];
                for (cj, &bj) in c_row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cj += aip * bj;
                }
            }
        }
        assert_eq!(par, serial);
    }

    #[test]
    fn bt_variant_matches_explicit_transpose() {
        let a = [1.0f64, 2., 3., 4., 5., 6.]; // 2x3
        let b = [1.0f64, 0., 1., 2., 2., 2.]; // 2x3, used as B^T
        let mut c = vec![0.0; 4];
        matmul_bt_add(&mut c, &a, &b, 2, 3, 2);
        let bt = transpose(&b, 2, 3);
        assert_eq!(c, matmul(&a, &bt, 2, 3, 2));
    }
}
