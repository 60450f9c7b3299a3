//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub row: isize,
    pub col: isize,
}

impl Strides {
    /// Row-major `rows x cols`, optionally viewed transposed.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Strides {
                row: 1,
                col: cols as isize,
            }
        } else {
            Strides {
                row: cols as isize,
                col: 1,
            }
        }
    }
}

/// `c = beta * c + a * b` where `a` is `m x k` and `b` is `k x n` under the
/// given strides.
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
    assert!(span(m, k, sa) <= a.len(), "gemm: lhs buffer too small");
    assert!(span(k, n, sb) <= b.len(), "gemm: rhs buffer too small");
    assert!(span(m, n, sc) <= c.len(), "gemm: output buffer too small");
    // SAFETY: every index touched by dgemm lies inside the slices, checked
    // above, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.row,
            sa.col,
            b.as_ptr(),
            sb.row,
            sb.col,
            beta,
            c.as_mut_ptr(),
            sc.row,
            sc.col,
        );
    }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.row as usize + (cols - 1) * s.col as usize + 1
}
