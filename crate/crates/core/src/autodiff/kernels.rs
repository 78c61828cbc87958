//! Dense matrix kernels shared by the differentiable ops.
//!
//! Every output row is produced by exactly one task with a fixed summation order, so
//! results are bit-identical regardless of the rayon thread count.

use std::cell::Cell;

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 15;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulate operations issued by matrix kernels on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

pub(crate) fn count(macs: usize) {
    MACS.with(|c| c.set(c.get() + macs as u64));
}

/// Below this many output columns a row is computed as dot products instead of row updates.
const DOT_COLUMNS: usize = 16;

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    t[j * rows + i] = a[i * cols + j];
                }
            }
        }
    }
    t
}

/// One operand of a product: an `rows × cols` matrix stored row-major, or its transpose.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a, T> {
    data: &'a [T],
    transposed: bool,
}

/// `out[m×n] = A[m×r] · B[r×n]`; `A` is stored `[r×m]` when transposed, `B` `[n×r]`.
pub(crate) fn product<T: Scalar>(
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    (m, r, n): (usize, usize, usize),
    out: &mut [T],
) {
    let dots_in_place = b.transposed && !a.transposed && r >= DOT_COLUMNS;
    if n >= DOT_COLUMNS && !dots_in_place {
        let b_rows = if b.transposed {
            std::borrow::Cow::Owned(transpose(b.data, n, r))
        } else {
            b.data.into()
        };
        let a_at = |i: usize, p: usize| {
            if a.transposed {
                a.data[p * m + i]
            } else {
                a.data[i * r + p]
            }
        };
        let row = |p: usize| &b_rows[p * n..(p + 1) * n];
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            let mut p = 0;
            // Four rank-1 updates per sweep keep the output row in registers longer.
            while p + 4 <= r {
                let (a0, a1, a2, a3) = (a_at(i, p), a_at(i, p + 1), a_at(i, p + 2), a_at(i, p + 3));
                let (b0, b1, b2, b3) = (row(p), row(p + 1), row(p + 2), row(p + 3));
                for j in 0..n {
                    c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                p += 4;
            }
            for p in p..r {
                let ap = a_at(i, p);
                for (c, &bv) in c_row.iter_mut().zip(row(p)) {
                    *c += ap * bv;
                }
            }
        }
    } else {
        let a_rows = if a.transposed {
            std::borrow::Cow::Owned(transpose(a.data, r, m))
        } else {
            a.data.into()
        };
        let b_cols = if b.transposed {
            b.data.into()
        } else {
            std::borrow::Cow::Owned(transpose(b.data, r, n))
        };
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            let a_row = &a_rows[i * r..(i + 1) * r];
            for (j, c) in c_row.iter_mut().enumerate() {
                *c = dot(a_row, &b_cols[j * r..(j + 1) * r]);
            }
        }
    }
}

pub(crate) fn plain<T>(data: &[T]) -> Operand<'_, T> {
    Operand {
        data,
        transposed: false,
    }
}

pub(crate) fn trans<T>(data: &[T]) -> Operand<'_, T> {
    Operand {
        data,
        transposed: true,
    }
}

/// Splits the output into row blocks so large products use the rayon pool; each output
/// element is still computed by one task in a fixed order.
fn product_par<T: Scalar>(
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    (m, r, n): (usize, usize, usize),
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let threads = rayon::current_num_threads();
    if m * r * n < PAR_THRESHOLD || threads == 1 || m < 2 || a.transposed {
        product(a, b, (m, r, n), &mut c);
        return c;
    }
    let rows = m.div_ceil(threads);
    c.par_chunks_mut(rows * n)
        .enumerate()
        .for_each(|(blk, out)| {
            let lo = blk * rows;
            let hi = lo + out.len() / n;
            product(plain(&a.data[lo * r..hi * r]), b, (hi - lo, r, n), out);
        });
    c
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    count(m * k * n);
    product_par(plain(a), plain(b), (m, k, n))
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`.
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    count(m * k * n);
    product_par(plain(a), trans(b), (m, n, k))
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    count(m * k * n);
    product_par(trans(a), plain(b), (k, m, n))
}

/// Which operands of a batched product are stored transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// `a[m×k] · b[k×n]`
    NN,
    /// `a[m×n] · b[k×n]ᵀ`, output `m×k`
    NT,
    /// `a[m×k]ᵀ · b[m×n]`, output `k×n`
    TN,
}

/// Batched product; `dims` are `(m, k, n)` in the sense documented on [`Layout`].
pub(crate) fn bmm_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    (m, k, n): (usize, usize, usize),
    layout: Layout,
) -> Vec<T> {
    count(batch * m * k * n);
    let (a_len, b_len, c_len) = match layout {
        Layout::NN => (m * k, k * n, m * n),
        Layout::NT => (m * n, k * n, m * k),
        Layout::TN => (m * k, m * n, k * n),
    };
    let mut c = vec![T::zero(); batch * c_len];
    let body = |(bi, out): (usize, &mut [T])| {
        let a = &a[bi * a_len..(bi + 1) * a_len];
        let b = &b[bi * b_len..(bi + 1) * b_len];
        match layout {
            Layout::NN => product(plain(a), plain(b), (m, k, n), out),
            Layout::NT => product(plain(a), trans(b), (m, n, k), out),
            Layout::TN => product(trans(a), plain(b), (k, m, n), out),
        }
    };
    if batch * m * k * n >= PAR_THRESHOLD && batch > 1 {
        c.par_chunks_mut(c_len).enumerate().for_each(body);
    } else {
        c.chunks_mut(c_len).enumerate().for_each(body);
    }
    c
}
