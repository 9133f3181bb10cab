use rayon::prelude::*;

use crate::Real;

/// Row and column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rs: 1,
            cs: cols as isize,
        }
    }
}

// Rows of C handed to one task. Fixed, so results do not depend on the
// number of worker threads.
const ROW_BLOCK: usize = 512;

#[cfg(not(feature = "f32"))]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    la: Layout,
    b: *const Real,
    lb: Layout,
    beta: Real,
    c: *mut Real,
    n_c: usize,
) {
    matrixmultiply::dgemm(
        m, k, n, 1.0, a, la.rs, la.cs, b, lb.rs, lb.cs, beta, c, n_c as isize, 1,
    );
}

#[cfg(feature = "f32")]
#[allow(clippy::too_many_arguments)]
unsafe fn kernel(
    m: usize,
    k: usize,
    n: usize,
    a: *const Real,
    la: Layout,
    b: *const Real,
    lb: Layout,
    beta: Real,
    c: *mut Real,
    n_c: usize,
) {
    matrixmultiply::sgemm(
        m, k, n, 1.0, a, la.rs, la.cs, b, lb.rs, lb.cs, beta, c, n_c as isize, 1,
    );
}

/// `c (+)= a · b` with `c` row-major `[m, n]`.
///
/// `a` is `[m, k]` and `b` is `[k, n]` under their layouts. Rows of `c` are
/// split into fixed blocks processed in parallel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    la: Layout,
    b: &[Real],
    lb: Layout,
    c: &mut [Real],
    accumulate: bool,
) {
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    check_extent(a, m, k, la);
    check_extent(b, k, n, lb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    let a_addr = a.as_ptr() as usize;
    let b_addr = b.as_ptr() as usize;
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, c_blk)| {
            let rows = c_blk.len() / n;
            let row0 = blk * ROW_BLOCK;
            // SAFETY: extents were checked above; every block reads rows
            // [row0, row0 + rows) of `a` and writes a disjoint slice of `c`.
            unsafe {
                let a_ptr = (a_addr as *const Real).offset(row0 as isize * la.rs);
                kernel(
                    rows,
                    k,
                    n,
                    a_ptr,
                    la,
                    b_addr as *const Real,
                    lb,
                    beta,
                    c_blk.as_mut_ptr(),
                    n,
                );
            }
        });
}

/// `c (+)= aᵀ · b` where `a` is row-major `[rows, k]` and `b` row-major
/// `[rows, n]`, reducing over a potentially long `rows` axis.
///
/// Partial products over fixed row blocks are summed in block order, so the
/// result is independent of thread count.
pub(crate) fn gemm_tn(
    rows: usize,
    k: usize,
    n: usize,
    a: &[Real],
    b: &[Real],
    c: &mut [Real],
    accumulate: bool,
) {
    assert_eq!(c.len(), k * n);
    assert_eq!(a.len(), rows * k);
    assert_eq!(b.len(), rows * n);
    const RED_BLOCK: usize = 4096;
    if !accumulate {
        c.fill(0.0);
    }
    if rows == 0 || k == 0 || n == 0 {
        return;
    }
    let partials: Vec<Vec<Real>> = (0..rows.div_ceil(RED_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let r0 = blk * RED_BLOCK;
            let r1 = (r0 + RED_BLOCK).min(rows);
            let mut part = vec![0.0; k * n];
            // SAFETY: the sub-slices cover rows [r0, r1) of both operands.
            unsafe {
                kernel(
                    k,
                    r1 - r0,
                    n,
                    a[r0 * k..].as_ptr(),
                    Layout::transposed(k),
                    b[r0 * n..].as_ptr(),
                    Layout::row_major(n),
                    0.0,
                    part.as_mut_ptr(),
                    n,
                );
            }
            part
        })
        .collect();
    for part in partials {
        for (ci, pi) in c.iter_mut().zip(part) {
            *ci += pi;
        }
    }
}

fn check_extent(buf: &[Real], rows: usize, cols: usize, l: Layout) {
    assert!(l.rs >= 0 && l.cs >= 0);
    let last = (rows - 1) * l.rs as usize + (cols - 1) * l.cs as usize;
    assert!(last < buf.len(), "gemm operand out of bounds");
}
