//! Dense numeric kernels shared by forward and backward rules.

/// `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is stored row-major as `m×k` (or `k×m` when `a_t`), `b` as `k×n` (or
/// `n×k` when `b_t`), `c` as `m×n`. With `accumulate` the product is added to
/// the existing contents of `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer length to the extents and
    // strides handed to the kernel, so all reads and writes stay in bounds.
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

/// Stable log-sum-exp of a slice; `-inf` for an all-`-inf` input.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of `x` (row length `cols`) into `out`, honouring an
/// optional `allowed` mask. Masked entries are exactly zero.
pub(crate) fn softmax_rows(x: &[f64], cols: usize, allowed: Option<&[bool]>, out: &mut [f64]) {
    for (r, (xr, or)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let mask = allowed.map(|m| &m[r * cols..(r + 1) * cols]);
        let ok = |j: usize| mask.is_none_or(|m| m[j]);
        let max = (0..cols)
            .filter(|&j| ok(j))
            .map(|j| xr[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..cols {
            if ok(j) {
                let e = (xr[j] - max).exp();
                or[j] = e;
                sum += e;
            } else {
                or[j] = 0.0;
            }
        }
        for v in or.iter_mut() {
            *v /= sum;
        }
    }
}
