//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Strided matrix view: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], isize, isize);

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major contiguous.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, c: &mut [f64]) {
    assert!(a.0.len() >= span(m, k, a.1, a.2), "gemm: lhs too short");
    assert!(b.0.len() >= span(k, n, b.1, b.2), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index touched by the strided views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
