//! Slice-level kernels shared by the pure tensor ops and the tape.

use alloc::vec;
use alloc::vec::Vec;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Row-major `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are asserted; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place numerically shifted softmax of one contiguous slice.
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Window offsets are clamped into `0..n` (replicate padding).
pub(crate) fn moving_average_cols(x: &[f64], n: usize, d: usize, k: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let inv = 1.0 / k as f64;
    let mut y = vec![0.0; n * d];
    for t in 0..n {
        let out = &mut y[t * d..(t + 1) * d];
        for o in -half..=half {
            let src = (t as isize + o).clamp(0, n as isize - 1) as usize;
            for (acc, v) in out.iter_mut().zip(&x[src * d..(src + 1) * d]) {
                *acc += v;
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
    }
    y
}

/// Adjoint of [`moving_average_cols`].
pub(crate) fn moving_average_cols_adjoint(dy: &[f64], n: usize, d: usize, k: usize, dx: &mut [f64]) {
    let half = (k / 2) as isize;
    let inv = 1.0 / k as f64;
    for t in 0..n {
        let g = &dy[t * d..(t + 1) * d];
        for o in -half..=half {
            let src = (t as isize + o).clamp(0, n as isize - 1) as usize;
            for (acc, v) in dx[src * d..(src + 1) * d].iter_mut().zip(g) {
                *acc += v * inv;
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044715 * x * x)
}
