use alloc::vec;

use super::kernels;
use super::Tensor;
use crate::error::{bail, Result};

/// `C = A · B` for `A: m×k`, `B: k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        bail!(Dimension, "matmul inner dimensions {} and {} differ", k, k2);
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(&[m, n], out)
}

/// Softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        bail!(Dimension, "axis {} out of range for rank {}", axis, shape.len());
    }
    let len = shape[axis];
    if len == 0 {
        bail!(Dimension, "softmax over an empty axis");
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = x.clone();
    out.requires_grad = false;
    let data = out.data_mut();
    let mut lane = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (a, slot) in lane.iter_mut().enumerate() {
                *slot = data[(o * len + a) * inner + i];
            }
            kernels::softmax_in_place(&mut lane);
            for (a, v) in lane.iter().enumerate() {
                data[(o * len + a) * inner + i] = *v;
            }
        }
    }
    Ok(out)
}

pub(crate) fn check_window(k: usize, n: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        bail!(Config, "moving-average window must be odd and positive, got {}", k);
    }
    if k > 2 * n - 1 {
        bail!(Config, "window {} exceeds 2n-1 = {}", k, 2 * n - 1);
    }
    Ok(())
}

/// Centred moving average over the rows of an `n×d` tensor with
/// replicate padding at both ends; output has the input's shape.
pub fn moving_average(x: &Tensor, k: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    check_window(k, n)?;
    Tensor::new(&[n, d], kernels::moving_average_cols(x.data(), n, d, k))
}
