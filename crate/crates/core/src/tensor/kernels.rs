//! Dense matrix kernels on row-major slices.
//!
//! Every output element accumulates over the shared dimension in ascending
//! index order, so results are independent of blocking and bit-reproducible.

use super::Float;

const MR: usize = 4;
const NR: usize = 16;

/// c[m×n] += a[m×k] · b[k×n]
///
/// Register tiles of MR×NR outputs are loaded from c, accumulated over k and
/// stored back, which keeps the per-element order of the naive loop. Wider
/// vector units are used when present; products and sums stay unfused, so
/// every path gives the same bits.
pub(crate) fn gemm_nn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the required feature was detected at runtime.
        unsafe { gemm_nn_avx(m, k, n, a, b, c) };
        return;
    }
    gemm_nn_tiled(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
fn gemm_nn_avx<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_nn_tiled(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_nn_tiled<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let (m_full, n_full) = (m - m % MR, n - n % NR);
    for i0 in (0..m_full).step_by(MR) {
        for j0 in (0..n_full).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR]);
            }
            for kk in 0..k {
                let bv: &[T; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + kk];
                    for (cv, &bj) in row.iter_mut().zip(bv) {
                        *cv += av * bj;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
            }
        }
        if n_full < n {
            gemm_rows(i0..i0 + MR, n_full..n, k, n, a, b, c);
        }
    }
    gemm_rows(m_full..m, 0..n, k, n, a, b, c);
}

#[inline(always)]
fn gemm_rows<T: Float>(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    for i in rows {
        let c_row = &mut c[i * n + cols.start..i * n + cols.end];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n + cols.start..kk * n + cols.end];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · bᵀ, with b stored as [n×k].
pub(crate) fn gemm_nt<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c);
}

/// c[m×n] += aᵀ · b[k×n], with a stored as [k×m].
pub(crate) fn gemm_tn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    let at = transpose(k, m, a);
    gemm_nn(m, k, n, &at, b, c);
}

/// [rows×cols] → [cols×rows]
pub(crate) fn transpose<T: Float>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_naive() {
        for (m, k, n) in [(3, 4, 5), (9, 7, 19), (8, 3, 16), (4, 1, 8)] {
            check_shape(m, k, n);
        }
    }

    fn check_shape(m: usize, k: usize, n: usize) {
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &transpose(k, n, &b), &mut c);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &transpose(m, k, &a), &b, &mut c);
        assert_eq!(c, want);
    }
}
