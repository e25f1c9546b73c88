//! Dense kernels shared by the tape ops. Plain loops ordered so the inner
//! loop walks contiguous memory.

use super::tensor::Real;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k`
/// when `tb`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if tb {
        let bt = transpose(b, n, k);
        gemm_b_rowmajor(ta, m, k, n, a, &bt, c);
    } else {
        gemm_b_rowmajor(ta, m, k, n, a, b, c);
    }
}

fn gemm_b_rowmajor<T: Real>(ta: bool, m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if ta {
        // a stored k×m
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let arow = &a[p * m..(p + 1) * m];
            for (i, &aip) in arow.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += aip * bv;
                }
            }
        }
    }
}

/// Transpose a row-major `rows×cols` buffer.
pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
