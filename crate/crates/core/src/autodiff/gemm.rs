//! Thin safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Row/column strides of a matrix view, in elements.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Strides(pub isize, pub isize);

impl Strides {
    pub(crate) fn row_major(cols: usize) -> Self {
        Strides(cols as isize, 1)
    }

    /// Strides for viewing a row-major `[cols x rows]` buffer as its transpose.
    pub(crate) fn transposed(stored_cols: usize) -> Self {
        Strides(1, stored_cols as isize)
    }
}

fn max_offset(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize
}

/// `c = beta * c + a · b` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || max_offset(m, k, sa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_offset(k, n, sb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_offset(m, n, sc) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        if beta == 0.0 {
            for i in 0..m {
                for j in 0..n {
                    c[i * sc.0 as usize + j * sc.1 as usize] = 0.0;
                }
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the max offsets
    // asserted above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            sc.0,
            sc.1,
        );
    }
}
