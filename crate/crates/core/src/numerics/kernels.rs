//! Row-major dense kernels.
//!
//! Parallel variants split work by output row only. Each output element is
//! reduced in the same order regardless of the thread count, so results are
//! bitwise identical between single- and multi-threaded runs.

use rayon::prelude::*;

/// Below this many multiply-adds the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// Output rows per GEMM call.
const ROW_BLOCK: usize = 64;

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (n, 1), m, k, n)
}

/// `c[m,n] = a[m,k] * b[n,k]^T`
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (k, 1), b, (1, k), m, k, n)
}

/// Strided GEMM into a fresh row-major `[m, n]` buffer. Large products are
/// split into row blocks of fixed height; the packed kernel reduces every
/// output element in the same order whatever the block or thread count.
fn gemm(a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n, "gemm operands too short");
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let block = |(bi, c_blk): (usize, &mut [f64])| {
        let rows = c_blk.len() / n;
        let a_off = bi * ROW_BLOCK * sa.0;
        // SAFETY: the strides describe `rows x k` and `k x n` views that lie
        // inside `a` and `b` (checked above), and `c_blk` is exactly
        // `rows x n` contiguous.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().add(a_off),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
    c
}

/// `c[k,n] = a[m,k]^T * b[m,n]`
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    gemm(a, (1, k), b, (n, 1), k, m, n)
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
