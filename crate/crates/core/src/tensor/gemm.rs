use super::Real;

/// Strided matrix view description: offset, row stride, column stride.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        Self {
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major matrix read transposed.
    pub fn transposed(cols: usize) -> Self {
        Self {
            off: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(self, off: usize) -> Self {
        Self { off, ..self }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        self.off + rows.saturating_sub(1) * self.rs + cols.saturating_sub(1) * self.cs
    }
}

/// Bounds-checked `c = alpha * a * b + beta * c` where `a` is m×k and `b` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    va: View,
    b: &[T],
    vb: View,
    beta: T,
    c: &mut [T],
    vc: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || va.last(m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || vb.last(k, n) < b.len(), "gemm: b out of bounds");
    assert!(vc.last(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: all reachable indices were bounds-checked above; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(va.off),
            va.rs as isize,
            va.cs as isize,
            b.as_ptr().add(vb.off),
            vb.rs as isize,
            vb.cs as isize,
            beta,
            c.as_mut_ptr().add(vc.off),
            vc.rs as isize,
            vc.cs as isize,
        );
    }
}
