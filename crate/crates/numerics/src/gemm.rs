//! Thin wrappers over the `matrixmultiply` kernels for the `Real` type.

use crate::Real;

/// General strided product `c = a·b + beta·c` with `a: m×k`, `b: k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    beta: Real,
    c: &mut [Real],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = (i as isize * rsc + j as isize * csc) as usize;
                c[o] *= beta;
            }
        }
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided offset
    // addressed by the given dimensions; all strides are non-negative.
    unsafe {
        kernel(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    rsa: isize,
    csa: isize,
    b: *const Real,
    rsb: isize,
    csb: isize,
    beta: Real,
    c: *mut Real,
    rsc: isize,
    csc: isize,
) {
    matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}

fn check(len: usize, rows: usize, cols: usize, what: &str) {
    assert!(len >= rows * cols, "{what}: buffer of {len} too small for {rows}x{cols}");
}

/// `out = a·b` for row-major `a: m×k`, `b: k×n`, `out: m×n`.
pub fn matmul_into(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    check(a.len(), m, k, "lhs");
    check(b.len(), k, n, "rhs");
    check(out.len(), m, n, "out");
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, out, n as isize, 1);
}

/// `a·b` for row-major `a: m×k`, `b: k×n`.
pub(crate) fn mm(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, &mut out, m, k, n);
    out
}

/// `acc += aᵀ·b` for row-major `a: k×m`, `b: k×n`, `acc: m×n`.
pub(crate) fn mm_tn_acc(a: &[Real], b: &[Real], acc: &mut [Real], m: usize, k: usize, n: usize) {
    check(a.len(), k, m, "lhs");
    check(b.len(), k, n, "rhs");
    check(acc.len(), m, n, "acc");
    gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, 1.0, acc, n as isize, 1);
}

/// `acc += a·bᵀ` for row-major `a: m×k`, `b: n×k`, `acc: m×n`.
pub(crate) fn mm_nt_acc(a: &[Real], b: &[Real], acc: &mut [Real], m: usize, k: usize, n: usize) {
    check(a.len(), m, k, "lhs");
    check(b.len(), n, k, "rhs");
    check(acc.len(), m, n, "acc");
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, 1.0, acc, n as isize, 1);
}
