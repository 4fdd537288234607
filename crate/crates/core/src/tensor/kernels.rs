//! Slice-level kernels. Matrices are row-major `[rows x channels]`; conv
//! weights are `[taps x in x out]`.

use super::Real;

/// Strided matrix view used to describe GEMM operands.
#[derive(Clone, Copy)]
struct View {
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl View {
    fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c += a * b` on views into the given slices.
fn gemm_acc<F: Real>(a: &[F], av: View, b: &[F], bv: View, c: &mut [F], cv: View) {
    if av.rows == 0 || av.cols == 0 || bv.cols == 0 {
        return;
    }
    assert_eq!(av.cols, bv.rows);
    assert_eq!((cv.rows, cv.cols), (av.rows, bv.cols));
    assert!(av.last_index() < a.len());
    assert!(bv.last_index() < b.len());
    assert!(cv.last_index() < c.len());
    // SAFETY: the asserts above keep every addressed element in bounds, and
    // `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        F::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            F::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            F::one(),
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// `out[rows x n] += a[rows x k] * b[k x n]`, all dense.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], rows: usize, k: usize, n: usize) {
    gemm_acc(
        a,
        View::dense(0, rows, k),
        b,
        View::dense(0, k, n),
        out,
        View::dense(0, rows, n),
    );
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Output `t` reads inputs `t - d*k`, `k in [0, K)`.
    Causal,
    /// Taps centred on `t` (for even `K` the extra tap lies in the past).
    Same,
}

/// Row shift of tap `k`: output row `t` reads input row `t - shift`.
pub fn tap_shift(k: usize, taps: usize, dilation: usize, padding: Padding) -> isize {
    let k = k as isize;
    let d = dilation as isize;
    match padding {
        Padding::Causal => (taps as isize - 1 - k) * d,
        Padding::Same => ((taps as isize - 1) / 2 - k) * d,
    }
}

/// Output rows `[t0, t1)` that have an in-range input for `shift`.
fn valid_rows(len: usize, shift: isize) -> (usize, usize) {
    let t0 = shift.max(0) as usize;
    let t1 = (len as isize + shift.min(0)).max(0) as usize;
    (t0.min(len), t1.max(t0.min(len)))
}

pub struct ConvShape {
    pub len: usize,
    pub taps: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
    pub padding: Padding,
}

fn fill_bias<F: Real>(out: &mut [F], bias: Option<&[F]>, cout: usize) {
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
}

pub fn conv1d_forward<F: Real>(
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    s: &ConvShape,
) -> Vec<F> {
    let mut out = vec![F::zero(); s.len * s.cout];
    fill_bias(&mut out, bias, s.cout);
    for k in 0..s.taps {
        let shift = tap_shift(k, s.taps, s.dilation, s.padding);
        let (t0, t1) = valid_rows(s.len, shift);
        if t1 <= t0 {
            continue;
        }
        let src = (t0 as isize - shift) as usize;
        gemm_acc(
            input,
            View::dense(src * s.cin, t1 - t0, s.cin),
            weight,
            View::dense(k * s.cin * s.cout, s.cin, s.cout),
            &mut out,
            View::dense(t0 * s.cout, t1 - t0, s.cout),
        );
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
pub fn conv1d_backward<F: Real>(
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    s: &ConvShape,
    grad_input: Option<&mut [F]>,
    grad_weight: Option<&mut [F]>,
    grad_bias: Option<&mut [F]>,
) {
    if let Some(gx) = grad_input {
        for k in 0..s.taps {
            let shift = tap_shift(k, s.taps, s.dilation, s.padding);
            let (t0, t1) = valid_rows(s.len, shift);
            if t1 <= t0 {
                continue;
            }
            let src = (t0 as isize - shift) as usize;
            gemm_acc(
                grad_out,
                View::dense(t0 * s.cout, t1 - t0, s.cout),
                weight,
                View::dense(k * s.cin * s.cout, s.cin, s.cout).t(),
                gx,
                View::dense(src * s.cin, t1 - t0, s.cin),
            );
        }
    }
    if let Some(gw) = grad_weight {
        for k in 0..s.taps {
            let shift = tap_shift(k, s.taps, s.dilation, s.padding);
            let (t0, t1) = valid_rows(s.len, shift);
            if t1 <= t0 {
                continue;
            }
            let src = (t0 as isize - shift) as usize;
            gemm_acc(
                input,
                View::dense(src * s.cin, t1 - t0, s.cin).t(),
                grad_out,
                View::dense(t0 * s.cout, t1 - t0, s.cout),
                gw,
                View::dense(k * s.cin * s.cout, s.cin, s.cout),
            );
        }
    }
    if let Some(gb) = grad_bias {
        column_sums_into(grad_out, s.cout, gb);
    }
}

/// Adds the column sums of a `[rows x cols]` matrix into `out`, summing in f64.
pub fn column_sums_into<F: Real>(m: &[F], cols: usize, out: &mut [F]) {
    let mut acc = vec![0.0f64; cols];
    for row in m.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o += F::of(a);
    }
}

pub struct TransposeShape {
    pub len: usize,
    pub taps: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl TransposeShape {
    pub fn out_len(&self) -> usize {
        self.len * self.stride
    }

    /// Number of input rows whose tap `k` lands inside the output.
    fn rows_for_tap(&self, k: usize) -> usize {
        let out_len = self.out_len();
        if k >= out_len {
            0
        } else {
            ((out_len - 1 - k) / self.stride + 1).min(self.len)
        }
    }
}

/// Fractionally strided convolution: `out[t*stride + k] += x[t] W_k`,
/// cropped to `len * stride` rows.
pub fn conv_transpose1d_forward<F: Real>(
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    s: &TransposeShape,
) -> Vec<F> {
    let mut out = vec![F::zero(); s.out_len() * s.cout];
    fill_bias(&mut out, bias, s.cout);
    for k in 0..s.taps {
        let n = s.rows_for_tap(k);
        if n == 0 {
            continue;
        }
        gemm_acc(
            input,
            View::dense(0, n, s.cin),
            weight,
            View::dense(k * s.cin * s.cout, s.cin, s.cout),
            &mut out,
            View {
                offset: k * s.cout,
                rows: n,
                cols: s.cout,
                rs: s.stride * s.cout,
                cs: 1,
            },
        );
    }
    out
}

pub fn conv_transpose1d_backward<F: Real>(
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    s: &TransposeShape,
    grad_input: Option<&mut [F]>,
    grad_weight: Option<&mut [F]>,
    grad_bias: Option<&mut [F]>,
) {
    let strided = |k: usize, n: usize| View {
        offset: k * s.cout,
        rows: n,
        cols: s.cout,
        rs: s.stride * s.cout,
        cs: 1,
    };
    if let Some(gx) = grad_input {
        for k in 0..s.taps {
            let n = s.rows_for_tap(k);
            if n == 0 {
                continue;
            }
            gemm_acc(
                grad_out,
                strided(k, n),
                weight,
                View::dense(k * s.cin * s.cout, s.cin, s.cout).t(),
                gx,
                View::dense(0, n, s.cin),
            );
        }
    }
    if let Some(gw) = grad_weight {
        for k in 0..s.taps {
            let n = s.rows_for_tap(k);
            if n == 0 {
                continue;
            }
            gemm_acc(
                input,
                View::dense(0, n, s.cin).t(),
                grad_out,
                strided(k, n),
                gw,
                View::dense(k * s.cin * s.cout, s.cin, s.cout),
            );
        }
    }
    if let Some(gb) = grad_bias {
        column_sums_into(grad_out, s.cout, gb);
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
