/// Strided matrix operand: (data, row stride, column stride).
pub(crate) type Operand<'a> = (&'a [f64], isize, isize);

/// `c = a·b + beta·c` for an (m×k)·(k×n) product, `c` row-major (m×n).
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, c: &mut [f64], beta: f64) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(span(m, k, a.1, a.2) <= a.0.len());
    debug_assert!(span(k, n, b.1, b.2) <= b.0.len());
    // SAFETY: the debug assertions above describe the contract every caller
    // upholds: each operand slice covers its strided extent and `c` holds m·n
    // elements with row stride n.
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

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs + 1) as usize
}
