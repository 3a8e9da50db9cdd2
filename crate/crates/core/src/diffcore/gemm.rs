//! Dense matrix products for the shapes convolutions produce: few rows
//! (output channels) against long contiguous rows (pixels).
//!
//! Operands are read in place without packing. Every output element is
//! accumulated in a fixed order with fused multiply-adds, so the result does
//! not depend on which instruction set the compiler vectorizes for.

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 16;
const LANES: usize = 8;

/// `c = op(a) · op(b) (+ c when accumulate)`; see [`Scalar::gemm`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 || k == 0 {
        if !accumulate {
            c.fill(T::zero());
        }
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the feature was detected at runtime.
            unsafe { gemm_avx2(m, k, n, a, trans_a, b, trans_b, c, accumulate) };
            return;
        }
    }
    dispatch(m, k, n, a, trans_a, b, trans_b, c, accumulate);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    keep: bool,
) {
    dispatch(m, k, n, a, ta, b, tb, c, keep);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
/// `keep` adds to the existing contents of `c`; otherwise they are overwritten.
fn dispatch<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], keep: bool) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    match tb {
        false => rows_kernel(m, k, n, a, rsa, csa, b, c, keep),
        true if !ta => dot_kernel(m, k, n, a, b, c, keep),
        true => naive(m, k, n, a, rsa, csa, b, c, keep),
    }
}

/// `c[i, :] += Σ_p a(i, p) · b[p, :]` with `b` row-major `k×n`.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn rows_kernel<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    keep: bool,
) {
    let full_n = n - n % NR;
    let mut panel = vec![T::zero(); MR * k];
    let mut i0 = 0;
    while i0 + MR <= m {
        for (p, ap) in panel.chunks_exact_mut(MR).enumerate() {
            for (r, x) in ap.iter_mut().enumerate() {
                *x = a[(i0 + r) * rsa + p * csa];
            }
        }
        for j0 in (0..full_n).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            if keep {
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(i0 + r) * n + j0..][..NR]);
                }
            }
            for (brow, ap) in b.chunks_exact(n).zip(panel.chunks_exact(MR)) {
                let bp: &[T; NR] = brow[j0..j0 + NR].try_into().unwrap();
                for (row, &av) in acc.iter_mut().zip(ap) {
                    for (x, &y) in row.iter_mut().zip(bp) {
                        *x = av.mul_add(y, *x);
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * n + j0..][..NR].copy_from_slice(row);
            }
        }
        rows_edge(i0..i0 + MR, full_n..n, n, k, a, rsa, csa, b, c, keep);
        i0 += MR;
    }
    rows_edge(i0..m, 0..n, n, k, a, rsa, csa, b, c, keep);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn rows_edge<T: Scalar>(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    n: usize,
    k: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    keep: bool,
) {
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let ci = &mut c[i * n + cols.start..i * n + cols.end];
        if !keep {
            ci.fill(T::zero());
        }
        for p in 0..k {
            let av = a[i * rsa + p * csa];
            for (x, &y) in ci.iter_mut().zip(&b[p * n + cols.start..p * n + cols.end]) {
                *x = av.mul_add(y, *x);
            }
        }
    }
}

/// `c[i, j] += Σ_p a[i, p] · b[j, p]`, both operands with contiguous rows of length `k`.
#[inline(always)]
fn dot_kernel<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], keep: bool) {
    let base = |c: T| if keep { c } else { T::zero() };
    const R: usize = 4;
    const S: usize = 2;
    let mut i0 = 0;
    while i0 < m {
        let ri = R.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let sj = S.min(n - j0);
            if ri == R && sj == S {
                let mut acc = [[[T::zero(); LANES]; S]; R];
                let full = k - k % LANES;
                let ar: [&[T]; R] = std::array::from_fn(|r| &a[(i0 + r) * k..][..full]);
                let bs: [&[T]; S] = std::array::from_fn(|s| &b[(j0 + s) * k..][..full]);
                for p in (0..full).step_by(LANES) {
                    let bl: [&[T; LANES]; S] = std::array::from_fn(|s| bs[s][p..p + LANES].try_into().unwrap());
                    for (acc_r, ar) in acc.iter_mut().zip(&ar) {
                        let al: &[T; LANES] = ar[p..p + LANES].try_into().unwrap();
                        for (acc_rs, bl) in acc_r.iter_mut().zip(&bl) {
                            for l in 0..LANES {
                                acc_rs[l] = al[l].mul_add(bl[l], acc_rs[l]);
                            }
                        }
                    }
                }
                let p = full;
                for r in 0..R {
                    for s in 0..S {
                        let tail = dot(
                            &a[(i0 + r) * k + p..(i0 + r + 1) * k],
                            &b[(j0 + s) * k + p..(j0 + s + 1) * k],
                        );
                        let o = (i0 + r) * n + j0 + s;
                        c[o] = base(c[o]) + (reduce(&acc[r][s]) + tail);
                    }
                }
            } else {
                for r in 0..ri {
                    for s in 0..sj {
                        let (ar, bs) = (&a[(i0 + r) * k..(i0 + r + 1) * k], &b[(j0 + s) * k..(j0 + s + 1) * k]);
                        let o = (i0 + r) * n + j0 + s;
                        c[o] = base(c[o]) + lane_dot(ar, bs);
                    }
                }
            }
            j0 += S;
        }
        i0 += R;
    }
}

/// Same accumulation order as the blocked path of [`dot_kernel`].
#[inline(always)]
fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let full = a.len() - a.len() % LANES;
    for (ac, bc) in a[..full].chunks_exact(LANES).zip(b[..full].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] = ac[l].mul_add(bc[l], acc[l]);
        }
    }
    reduce(&acc) + dot(&a[full..], &b[full..])
}

#[inline(always)]
fn reduce<T: Scalar>(acc: &[T; LANES]) -> T {
    let h: [T; 4] = std::array::from_fn(|l| acc[l] + acc[l + 4]);
    (h[0] + h[2]) + (h[1] + h[3])
}

#[inline(always)]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| x.mul_add(y, s))
}

#[allow(clippy::too_many_arguments)]
fn naive<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], rsa: usize, csa: usize, b: &[T], c: &mut [T], keep: bool) {
    for i in 0..m {
        for j in 0..n {
            let mut s = T::zero();
            for p in 0..k {
                s = a[i * rsa + p * csa].mul_add(b[j * k + p], s);
            }
            c[i * n + j] = if keep { c[i * n + j] + s } else { s };
        }
    }
}
