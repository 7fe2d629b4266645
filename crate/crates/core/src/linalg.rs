//! Thin safe wrappers over `matrixmultiply::sgemm`.

/// Strided view of a row-major (or transposed) matrix inside a slice.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn rows(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major matrix with `row_stride`.
    pub fn transposed(offset: usize, row_stride: usize) -> Self {
        Self {
            offset,
            row_stride: 1,
            col_stride: row_stride,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// `c = a * b + beta * c` for `a: m x k`, `b: k x n`, `c: m x n`, all given
/// as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    av: View,
    b: &[f32],
    bv: View,
    c: &mut [f32],
    cv: View,
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len().max(1) || k == 0, "gemm: a out of bounds");
    assert!(bv.last_index(k, n) < b.len().max(1) || k == 0, "gemm: b out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// Dense row-major product `c (+)= op(a) * op(b)` where `op` optionally
/// transposes. `a` is stored `m x k` (or `k x m` when `a_t`), `b` is stored
/// `k x n` (or `n x k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let av = if a_t {
        View::transposed(0, m)
    } else {
        View::rows(0, k)
    };
    let bv = if b_t {
        View::transposed(0, k)
    } else {
        View::rows(0, n)
    };
    gemm(
        m,
        k,
        n,
        a,
        av,
        b,
        bv,
        c,
        View::rows(0, n),
        if accumulate { 1.0 } else { 0.0 },
    );
}
