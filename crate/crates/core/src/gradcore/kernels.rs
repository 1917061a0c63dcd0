//! Dense `f64` matrix products for the tape.
//!
//! Large products are split into fixed-size blocks that run on the rayon pool.
//! Block boundaries never depend on the thread count and partial sums are
//! combined in block order, so results are bit-identical for any pool size.

use rayon::prelude::*;

const ROW_BLOCK: usize = 256;
const REDUCE_BLOCK: usize = 1024;
const PARALLEL_WORK: usize = 1 << 18;

/// `C = op(A) · op(B)` where `op(A)` is `m×k` and `op(B)` is `k×n`.
///
/// `a_t` means A is stored as `k×m`; `b_t` means B is stored as `n×k`.
pub(crate) fn matmul(
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let work = m * k * n;
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };

    if a_t && k > REDUCE_BLOCK && work >= PARALLEL_WORK {
        // Sum over the long stored-row axis: per-block partials, then fold.
        let partials: Vec<Vec<f64>> = (0..k.div_ceil(REDUCE_BLOCK))
            .into_par_iter()
            .map(|blk| {
                let k0 = blk * REDUCE_BLOCK;
                let kb = REDUCE_BLOCK.min(k - k0);
                let mut part = vec![0.0; m * n];
                let a_off = &a[k0 * m..];
                let b_off = if b_t { &b[k0..] } else { &b[k0 * n..] };
                gemm(m, kb, n, a_off, 1, m as isize, b_off, rsb, csb, &mut part);
                part
            })
            .collect();
        for p in partials {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi;
            }
        }
        return c;
    }

    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    if m > ROW_BLOCK && work >= PARALLEL_WORK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(blk, cblk)| {
                let m0 = blk * ROW_BLOCK;
                let mb = cblk.len() / n;
                let a_off = if a_t { &a[m0..] } else { &a[m0 * k..] };
                gemm(mb, k, n, a_off, rsa, csa, b, rsb, csb, cblk);
            });
    } else {
        gemm(m, k, n, a, rsa, csa, b, rsb, csb, &mut c);
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index the kernel touches is (i*rs + p*cs) for i < rows and
    // p < cols of the respective operand, which the callers keep in bounds of
    // the provided slices; C is a dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], a_t: bool, b: &[f64], b_t: bool, m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                    let bv = if b_t { b[j * k + p] } else { b[p * n + j] };
                    s += av * bv;
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn all_transpose_variants_match_naive() {
        let shapes = [(3, 4, 5), (300, 7, 130), (9, 3000, 100), (1, 1, 1)];
        for &(m, k, n) in &shapes {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 97) as f64) / 40.0 - 1.2).collect();
            for a_t in [false, true] {
                for b_t in [false, true] {
                    let got = matmul(&a, a_t, &b, b_t, m, k, n);
                    let want = naive(&a, a_t, &b, b_t, m, k, n);
                    for (g, w) in got.iter().zip(&want) {
                        assert!((g - w).abs() <= 1e-9 * (1.0 + w.abs()), "{g} vs {w}");
                    }
                }
            }
        }
    }
}
