//! Direct-loop convolution kernels and their hand-derived gradients.
//!
//! Work is split over output channels (forward, weight gradient) or input
//! channels (input gradient); each slice is accumulated by one closure call,
//! so the parallel and sequential paths produce identical bits.

use std::borrow::Cow;

use crate::error::{PulmoError, Result};
use crate::parallel::for_each_chunk_mut;

use super::Tensor;

/// Geometry of a single-channel 3-d correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

const AXES: [&str; 3] = ["T", "H", "W"];

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(PulmoError::dim(
                    format!("stride {}", AXES[a]),
                    ">= 1",
                    stride[a],
                ));
            }
            let padded = input[a] + 2 * pad[a];
            if kernel[a] == 0 || kernel[a] > padded {
                return Err(PulmoError::dim(
                    format!("kernel {}", AXES[a]),
                    format!("1..={padded} (input {} + 2*pad {})", input[a], pad[a]),
                    kernel[a],
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom {
            input,
            kernel,
            stride,
            pad,
            output,
        })
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Output positions `o` along `axis` whose input coordinate
    /// `o*stride + k - pad` is inside the input, as `(lo, hi)` half-open.
    #[inline]
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n, s, p, out) = (
            self.input[axis] as isize,
            self.stride[axis] as isize,
            self.pad[axis] as isize,
            self.output[axis] as isize,
        );
        let k = k as isize;
        // smallest o with o*s + k - p >= 0
        let lo = ((p - k) + s - 1).div_euclid(s).max(0);
        // largest o with o*s + k - p <= n - 1
        let hi = ((n - 1 + p - k).div_euclid(s) + 1).min(out);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride[axis] + k - self.pad[axis]
    }
}

impl ConvGeom {
    /// Width of one phase row: input columns `r, r+s, r+2s, ...` for the W
    /// stride `s`.
    #[inline]
    fn phase_width(&self) -> usize {
        self.input[2].div_ceil(self.stride[2])
    }

    /// Floats per `[T,H]` row after [`phase_split`].
    #[inline]
    fn phased_row(&self) -> usize {
        self.stride[2] * self.phase_width()
    }

    fn phased_len(&self) -> usize {
        self.input[0] * self.input[1] * self.phased_row()
    }

    /// Start, within a phased row, of the columns read by tap `dw` for the
    /// outputs `w0..`: column `s*wo + dw - pad` lives at
    /// `phase*wp + wo + offset`.
    #[inline]
    fn phased_start(&self, dw: usize, w0: usize) -> usize {
        let s = self.stride[2] as isize;
        let d = dw as isize - self.pad[2] as isize;
        let at = d.rem_euclid(s) * self.phase_width() as isize + w0 as isize + d.div_euclid(s);
        at as usize
    }
}

/// Reorder every input row by column phase modulo the W stride so strided
/// taps read contiguous memory. Stride 1 is already in that layout.
fn phase_split<'a>(input: &'a [f32], g: &ConvGeom) -> Cow<'a, [f32]> {
    let s = g.stride[2];
    if s == 1 {
        return Cow::Borrowed(input);
    }
    let (iw, wp) = (g.input[2], g.phase_width());
    let rows = input.len() / iw;
    let mut out = vec![0.0; rows * s * wp];
    for (src, dst) in input.chunks_exact(iw).zip(out.chunks_exact_mut(s * wp)) {
        for (x, &v) in src.iter().enumerate() {
            dst[(x % s) * wp + x / s] = v;
        }
    }
    Cow::Owned(out)
}

/// Inverse of [`phase_split`] for one channel, adding into `out`.
fn phase_merge_add(phased: &[f32], g: &ConvGeom, out: &mut [f32]) {
    let (s, iw, wp) = (g.stride[2], g.input[2], g.phase_width());
    for (src, dst) in phased.chunks_exact(s * wp).zip(out.chunks_exact_mut(iw)) {
        for (x, o) in dst.iter_mut().enumerate() {
            *o += src[(x % s) * wp + x / s];
        }
    }
}

/// Dot product over eight independent accumulators, which the compiler
/// can keep in one vector register.
#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f32>() + tail
}

/// `out += correlate(input, kernel)` for one phased input channel and one
/// output channel.
fn accumulate_forward(g: &ConvGeom, input: &[f32], kernel: &[f32], out: &mut [f32]) {
    let ih = g.input[1];
    let [kt, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let row = g.phased_row();
    for dt in 0..kt {
        let (t0, t1) = g.valid(0, dt);
        for dh in 0..kh {
            let (h0, h1) = g.valid(1, dh);
            for dw in 0..kw {
                let (w0, w1) = g.valid(2, dw);
                let start = g.phased_start(dw, w0);
                let wv = kernel[(dt * kh + dh) * kw + dw];
                for to in t0..t1 {
                    let ti = g.src(0, to, dt);
                    for ho in h0..h1 {
                        let hi = g.src(1, ho, dh);
                        let base = (ti * ih + hi) * row + start;
                        let src = &input[base..base + (w1 - w0)];
                        let o = (to * oh + ho) * ow;
                        for (y, x) in out[o + w0..o + w1].iter_mut().zip(src) {
                            *y += wv * x;
                        }
                    }
                }
            }
        }
    }
}

/// `grad_kernel += d out / d kernel` contracted with `grad_out`.
fn accumulate_weight_grad(g: &ConvGeom, input: &[f32], grad_out: &[f32], grad_kernel: &mut [f32]) {
    let ih = g.input[1];
    let [kt, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let row = g.phased_row();
    for dt in 0..kt {
        let (t0, t1) = g.valid(0, dt);
        for dh in 0..kh {
            let (h0, h1) = g.valid(1, dh);
            for dw in 0..kw {
                let (w0, w1) = g.valid(2, dw);
                let start = g.phased_start(dw, w0);
                let mut acc = 0.0f32;
                for to in t0..t1 {
                    let ti = g.src(0, to, dt);
                    for ho in h0..h1 {
                        let hi = g.src(1, ho, dh);
                        let base = (ti * ih + hi) * row + start;
                        let o = (to * oh + ho) * ow;
                        acc += dot_lanes(&grad_out[o + w0..o + w1], &input[base..base + (w1 - w0)]);
                    }
                }
                grad_kernel[(dt * kh + dh) * kw + dw] += acc;
            }
        }
    }
}

/// `grad_input += d out / d input` contracted with `grad_out`, with
/// `grad_input` in the phased layout.
fn accumulate_input_grad(g: &ConvGeom, kernel: &[f32], grad_out: &[f32], grad_input: &mut [f32]) {
    let ih = g.input[1];
    let [kt, kh, kw] = g.kernel;
    let [_, oh, ow] = g.output;
    let row = g.phased_row();
    for dt in 0..kt {
        let (t0, t1) = g.valid(0, dt);
        for dh in 0..kh {
            let (h0, h1) = g.valid(1, dh);
            for dw in 0..kw {
                let (w0, w1) = g.valid(2, dw);
                let start = g.phased_start(dw, w0);
                let wv = kernel[(dt * kh + dh) * kw + dw];
                for to in t0..t1 {
                    let ti = g.src(0, to, dt);
                    for ho in h0..h1 {
                        let hi = g.src(1, ho, dh);
                        let base = (ti * ih + hi) * row + start;
                        let o = (to * oh + ho) * ow;
                        for (gi, gv) in grad_input[base..base + (w1 - w0)]
                            .iter_mut()
                            .zip(&grad_out[o + w0..o + w1])
                        {
                            *gi += wv * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Run `fill` on a zeroed phased buffer for one channel and add the result
/// into `grad_c`; stride 1 accumulates in place.
fn with_phased_grad(g: &ConvGeom, grad_c: &mut [f32], fill: impl FnOnce(&mut [f32])) {
    if g.stride[2] == 1 {
        fill(grad_c);
    } else {
        let mut buf = vec![0.0; g.phased_len()];
        fill(&mut buf);
        phase_merge_add(&buf, g, grad_c);
    }
}

/// Validated shapes of a dense 3-d convolution.
struct Conv3dDims {
    channels: usize,
    filters: usize,
    geom: ConvGeom,
}

fn conv3d_dims(
    input: &Tensor,
    kernels: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Conv3dDims> {
    input.expect_rank("conv3d input", 4)?;
    kernels.expect_rank("conv3d kernels", 5)?;
    let s = input.shape();
    let k = kernels.shape();
    if k[1] != s[0] {
        return Err(PulmoError::dim("conv3d channels (C)", s[0], k[1]));
    }
    let geom = ConvGeom::new([s[1], s[2], s[3]], [k[2], k[3], k[4]], stride, pad)?;
    Ok(Conv3dDims {
        channels: s[0],
        filters: k[0],
        geom,
    })
}

/// Dense 3-d cross-correlation: `[C,T,H,W] * [F,C,kt,kh,kw] -> [F,T',H',W']`.
pub fn conv3d(
    input: &Tensor,
    kernels: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor> {
    let d = conv3d_dims(input, kernels, stride, pad)?;
    let g = d.geom;
    let (k_len, out_len) = (g.kernel_len(), g.output_len());
    let mut out = Tensor::zeros(&[d.filters, g.output[0], g.output[1], g.output[2]]);
    let x = phase_split(input.data(), &g);
    let pl = g.phased_len();
    let k = kernels.data();
    for_each_chunk_mut(out.data_mut(), out_len, |f, out_f| {
        for c in 0..d.channels {
            let kern = &k[(f * d.channels + c) * k_len..(f * d.channels + c + 1) * k_len];
            accumulate_forward(&g, &x[c * pl..(c + 1) * pl], kern, out_f);
        }
    });
    Ok(out)
}

/// Gradients of [`conv3d`]: `(d input, d kernels)`. The input gradient is
/// skipped when `want_input` is false.
pub fn conv3d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let d = conv3d_dims(input, kernels, stride, pad)?;
    let g = d.geom;
    grad_out.expect_shape(
        "conv3d grad_out",
        &[d.filters, g.output[0], g.output[1], g.output[2]],
    )?;
    let (in_len, k_len, out_len) = (g.input_len(), g.kernel_len(), g.output_len());
    let x = phase_split(input.data(), &g);
    let pl = g.phased_len();
    let go = grad_out.data();
    let k = kernels.data();

    let mut grad_k = Tensor::zeros(kernels.shape());
    for_each_chunk_mut(grad_k.data_mut(), d.channels * k_len, |f, gk_f| {
        let g_f = &go[f * out_len..(f + 1) * out_len];
        for c in 0..d.channels {
            accumulate_weight_grad(
                &g,
                &x[c * pl..(c + 1) * pl],
                g_f,
                &mut gk_f[c * k_len..(c + 1) * k_len],
            );
        }
    });

    let grad_in = if want_input {
        let mut gi = Tensor::zeros(input.shape());
        for_each_chunk_mut(gi.data_mut(), in_len, |c, gi_c| {
            with_phased_grad(&g, gi_c, |buf| {
                for f in 0..d.filters {
                    let kern = &k[(f * d.channels + c) * k_len..(f * d.channels + c + 1) * k_len];
                    accumulate_input_grad(&g, kern, &go[f * out_len..(f + 1) * out_len], buf);
                }
            });
        });
        Some(gi)
    } else {
        None
    };
    Ok((grad_in, grad_k))
}

fn depthwise_dims(
    input: &Tensor,
    kernels: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Conv3dDims> {
    input.expect_rank("depthwise input", 4)?;
    kernels.expect_rank("depthwise kernels", 5)?;
    let s = input.shape();
    let k = kernels.shape();
    if k[0] != s[0] {
        return Err(PulmoError::dim("depthwise channels (C)", s[0], k[0]));
    }
    if k[1] != 1 {
        return Err(PulmoError::dim("depthwise kernel group width", 1, k[1]));
    }
    let geom = ConvGeom::new([s[1], s[2], s[3]], [k[2], k[3], k[4]], stride, pad)?;
    Ok(Conv3dDims {
        channels: s[0],
        filters: s[0],
        geom,
    })
}

/// Channel-wise 3-d correlation: `[C,T,H,W] * [C,1,kt,kh,kw] -> [C,T',H',W']`.
pub fn conv3d_depthwise(
    input: &Tensor,
    kernels: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor> {
    let d = depthwise_dims(input, kernels, stride, pad)?;
    let g = d.geom;
    let (k_len, out_len) = (g.kernel_len(), g.output_len());
    let mut out = Tensor::zeros(&[d.channels, g.output[0], g.output[1], g.output[2]]);
    let x = phase_split(input.data(), &g);
    let pl = g.phased_len();
    let k = kernels.data();
    for_each_chunk_mut(out.data_mut(), out_len, |c, out_c| {
        accumulate_forward(
            &g,
            &x[c * pl..(c + 1) * pl],
            &k[c * k_len..(c + 1) * k_len],
            out_c,
        );
    });
    Ok(out)
}

pub fn conv3d_depthwise_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: [usize; 3],
    pad: [usize; 3],
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let d = depthwise_dims(input, kernels, stride, pad)?;
    let g = d.geom;
    grad_out.expect_shape(
        "depthwise grad_out",
        &[d.channels, g.output[0], g.output[1], g.output[2]],
    )?;
    let (in_len, k_len, out_len) = (g.input_len(), g.kernel_len(), g.output_len());
    let x = phase_split(input.data(), &g);
    let pl = g.phased_len();
    let go = grad_out.data();
    let k = kernels.data();

    let mut grad_k = Tensor::zeros(kernels.shape());
    for_each_chunk_mut(grad_k.data_mut(), k_len, |c, gk_c| {
        accumulate_weight_grad(
            &g,
            &x[c * pl..(c + 1) * pl],
            &go[c * out_len..(c + 1) * out_len],
            gk_c,
        );
    });
    let grad_in = if want_input {
        let mut gi = Tensor::zeros(input.shape());
        for_each_chunk_mut(gi.data_mut(), in_len, |c, gi_c| {
            with_phased_grad(&g, gi_c, |buf| {
                accumulate_input_grad(
                    &g,
                    &k[c * k_len..(c + 1) * k_len],
                    &go[c * out_len..(c + 1) * out_len],
                    buf,
                )
            });
        });
        Some(gi)
    } else {
        None
    };
    Ok((grad_in, grad_k))
}

fn lift_2d(input: &Tensor, kernels: &Tensor) -> Result<(Tensor, Tensor)> {
    input.expect_rank("conv2d input", 3)?;
    kernels.expect_rank("conv2d kernels", 4)?;
    let s = input.shape();
    let k = kernels.shape();
    Ok((
        input.clone().reshape(&[s[0], 1, s[1], s[2]])?,
        kernels.clone().reshape(&[k[0], k[1], 1, k[2], k[3]])?,
    ))
}

/// 2-d cross-correlation: `[C,H,W] * [F,C,kh,kw] -> [F,H',W']`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (x, k) = lift_2d(input, kernels)?;
    let out = conv3d(&x, &k, [1, stride, stride], [0, pad, pad])?;
    let s = out.shape().to_vec();
    out.reshape(&[s[0], s[2], s[3]])
}

pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let (x, k) = lift_2d(input, kernels)?;
    grad_out.expect_rank("conv2d grad_out", 3)?;
    let gs = grad_out.shape();
    let go = grad_out.clone().reshape(&[gs[0], 1, gs[1], gs[2]])?;
    let (gi, gk) = conv3d_backward(&x, &k, &go, [1, stride, stride], [0, pad, pad], want_input)?;
    let gi = gi.map(|t| t.reshape(input.shape())).transpose()?;
    Ok((gi, gk.reshape(kernels.shape())?))
}
