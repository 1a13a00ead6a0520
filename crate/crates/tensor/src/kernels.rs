use crate::Real;

/// `c = beta * c + op(a) * op(b)` for row-major operands.
///
/// `a` is stored `[m, k]` (or `[k, m]` when `trans_a`), `b` is stored `[k, n]`
/// (or `[n, k]` when `trans_b`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    beta: Real,
    c: &mut [Real],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        gemm_raw(
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
            n as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_kernel;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_kernel;

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw(
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
    gemm_kernel(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
}
