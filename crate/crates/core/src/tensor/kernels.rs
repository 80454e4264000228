//! Dense matrix kernels on row-major slices.

use super::Scalar;

/// `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![S::ZERO; m * n];
    S::gemm(
        m, k, n, S::ONE, a, k as isize, 1, b, n as isize, 1, S::ZERO, &mut c, n as isize, 1,
    );
    c
}

/// `c += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    S::gemm(
        m, k, n, S::ONE, a, k as isize, 1, b, 1, k as isize, S::ONE, c, n as isize, 1,
    );
}

/// `c += a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    S::gemm(
        m, k, n, S::ONE, a, 1, m as isize, b, n as isize, 1, S::ONE, c, n as isize, 1,
    );
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stabilized in-place softmax of one row.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max(v);
    }
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // b transposed into 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut c3, 2, 3, 4);
        assert_eq!(c, c3);
    }
}
