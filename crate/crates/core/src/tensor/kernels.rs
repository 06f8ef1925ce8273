//! Numeric kernels shared by the forward and backward passes.

/// `C (m×n) [+]= op(A) (m×k) · op(B) (k×n)` on row-major buffers.
///
/// With `a_trans`, `a` holds the `k×m` matrix whose transpose is used; the
/// same for `b_trans` with a `n×k` buffer. `accumulate` adds into `c`
/// instead of overwriting it.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
    assert_eq!(c.len(), m * n, "gemm: output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access made by
    // dgemm for these extents and strides stays within the three buffers,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stable softmax along the middle extent of an `(outer, len, inner)` layout.
pub(crate) fn softmax_into(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let idx = |t: usize| base + t * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(x[idx(t)]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[idx(t)] - max).exp();
                out[idx(t)] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for t in 0..len {
                out[idx(t)] *= inv;
            }
        }
    }
}
