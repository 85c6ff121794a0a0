//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Layout of a row-major matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Op {
    /// Use as stored.
    N,
    /// Use the transpose of the stored matrix.
    T,
}

/// `c = a * b (+ c if accumulate)` with `a: m x k`, `b: k x n`, `c: m x n`
/// after applying the operand transposes. Counts `m * k * n` MACs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm out length");
    crate::flops::record((m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the slices were checked above to hold exactly the m*k, k*n and
    // m*n elements addressed by these strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
