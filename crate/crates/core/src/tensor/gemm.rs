/// Strided matrix view: `(data, row_stride, col_stride)`.
type View<'a> = (&'a [f64], isize, isize);

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
}

/// `c = a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and `c` is a dense
/// row-major `m×n` buffer. Strides are in elements and must be nonnegative.
pub fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    let (ad, ars, acs) = a;
    let (bd, brs, bcs) = b;
    assert!(ars >= 0 && acs >= 0 && brs >= 0 && bcs >= 0);
    assert!(m * n <= c.len(), "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(max_offset(m, k, ars, acs) < ad.len(), "gemm lhs out of bounds");
    assert!(max_offset(k, n, brs, bcs) < bd.len(), "gemm rhs out of bounds");
    // SAFETY: all index ranges reachable from the strides were bounds-checked
    // above and the output is a dense m×n block of `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            ad.as_ptr(),
            ars,
            acs,
            bd.as_ptr(),
            brs,
            bcs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
