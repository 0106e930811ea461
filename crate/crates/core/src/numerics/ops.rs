use crate::error::{PulmoError, Result};
use crate::parallel::for_each_chunk_mut;

use super::Tensor;

/// Max pooling over `k x k` windows of a `[C,H,W]` tensor.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_with_indices(input, k, stride).map(|(t, _)| t)
}

/// Max pooling that also returns, for every output element, the flat input
/// index of the (first) maximum in its window.
pub fn maxpool2d_with_indices(
    input: &Tensor,
    k: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    input.expect_rank("maxpool2d input", 3)?;
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if stride == 0 {
        return Err(PulmoError::dim("maxpool2d stride", ">= 1", 0));
    }
    if k == 0 || k > h {
        return Err(PulmoError::dim("maxpool2d window H", format!("1..={h}"), k));
    }
    if k > w {
        return Err(PulmoError::dim("maxpool2d window W", format!("1..={w}"), k));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let x = input.data();
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut idx = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut arg = 0;
                for di in 0..k {
                    for dj in 0..k {
                        let p = (ch * h + i * stride + di) * w + j * stride + dj;
                        if x[p] > best {
                            best = x[p];
                            arg = p;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                out.data_mut()[o] = best;
                idx[o] = arg;
            }
        }
    }
    Ok((out, idx))
}

/// Route pooled gradients back to the argmax positions.
pub fn maxpool2d_backward(grad_out: &[f32], indices: &[usize], input_shape: &[usize]) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    let g = gi.data_mut();
    for (&go, &p) in grad_out.iter().zip(indices) {
        g[p] += go;
    }
    gi
}

/// `W x + b` for `x: [N]`, `W: [M,N]`, `b: [M]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    input.expect_rank("linear input", 1)?;
    linear_slice(input.data(), weight, bias).map(Tensor::vector)
}

/// [`linear`] over a raw slice, for callers that keep activations unboxed.
pub fn linear_slice(x: &[f32], weight: &Tensor, bias: &Tensor) -> Result<Vec<f32>> {
    weight.expect_rank("linear weight", 2)?;
    let (m, n) = (weight.dim(0), weight.dim(1));
    if x.len() != n {
        return Err(PulmoError::dim("linear inner (N)", n, x.len()));
    }
    bias.expect_shape("linear bias", &[m])?;
    let w = weight.data();
    let mut out = bias.data().to_vec();
    for_each_chunk_mut(&mut out, 64, |blk, o| {
        for (r, y) in o.iter_mut().enumerate() {
            let row = &w[(blk * 64 + r) * n..(blk * 64 + r + 1) * n];
            *y += dot(row, x);
        }
    });
    Ok(out)
}

/// Accumulate the gradients of `y = W x + b` given `dy`; returns `dx` when
/// requested.
pub fn linear_backward(
    x: &[f32],
    weight: &Tensor,
    grad_out: &[f32],
    grad_weight: &mut Tensor,
    grad_bias: &mut Tensor,
    want_input: bool,
) -> Option<Vec<f32>> {
    let n = x.len();
    let w = weight.data();
    for_each_chunk_mut(grad_weight.data_mut(), n, |r, gw_row| {
        let g = grad_out[r];
        if g != 0.0 {
            for (a, &xi) in gw_row.iter_mut().zip(x) {
                *a += g * xi;
            }
        }
    });
    for (b, g) in grad_bias.data_mut().iter_mut().zip(grad_out) {
        *b += g;
    }
    if !want_input {
        return None;
    }
    let mut dx = vec![0.0f32; n];
    for (r, &g) in grad_out.iter().enumerate() {
        if g != 0.0 {
            for (d, &wv) in dx.iter_mut().zip(&w[r * n..(r + 1) * n]) {
                *d += g * wv;
            }
        }
    }
    Some(dx)
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax of a vector.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("softmax input", 1)?;
    softmax_slice(input.data()).map(Tensor::vector)
}

pub fn softmax_slice(x: &[f32]) -> Result<Vec<f32>> {
    if x.is_empty() {
        return Err(PulmoError::dim("softmax length", ">= 1", 0));
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(PulmoError::numeric("softmax", format!("input {v}")));
    }
    let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zero the gradient wherever the forward activation was clipped.
pub fn relu_backward_inplace(activation: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
