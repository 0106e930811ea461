//! Spatial resampling of `[T, C, H, W]` clips.

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;

/// Bilinear resize of one `h x w` plane (half-pixel centres, edge clamped).
pub fn resize_bilinear(plane: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(plane.len(), h * w, "plane length");
    assert!(oh > 0 && ow > 0, "output size must be positive");
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    let taps = |o: usize, s: f32, n: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * s - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| taps(x, sx, w)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = taps(y, sy, h);
        let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
        for &(x0, x1, fx) in &xs {
            let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
            let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
            out.push(top + (bot - top) * fy);
        }
    }
    out
}

/// Mean over non-overlapping `factor x factor` blocks.
pub fn area_downsample(clip: &Tensor, factor: usize) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    if factor == 0 {
        return Err(PulmoError::Config("downsample factor must be >= 1".into()));
    }
    let s = clip.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % factor != 0 || w % factor != 0 {
        return Err(PulmoError::dim(
            "frame side divisible by downsample factor",
            format!("multiple of {factor}"),
            format!("{h}x{w}"),
        ));
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = Vec::with_capacity(t * c * oh * ow);
    for plane in clip.data().chunks_exact(h * w) {
        let mut acc = vec![0.0f32; oh * ow];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let dst = &mut acc[(y / factor) * ow..(y / factor + 1) * ow];
            for (x, &v) in row.iter().enumerate() {
                dst[x / factor] += v;
            }
        }
        out.extend(acc.into_iter().map(|v| v * norm));
    }
    Tensor::new(vec![t, c, oh, ow], out)
}

/// Resize a clip to `side x side`: block averaging when the side divides
/// the frame evenly, bilinear otherwise.
pub fn resize_clip(clip: &Tensor, side: usize) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    if side == 0 {
        return Err(PulmoError::Config("target side must be >= 1".into()));
    }
    let s = clip.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h == side && w == side {
        return Ok(clip.clone());
    }
    if h == w && h % side == 0 {
        return area_downsample(clip, h / side);
    }
    let mut out = Vec::with_capacity(t * c * side * side);
    for plane in clip.data().chunks_exact(h * w) {
        out.extend(resize_bilinear(plane, h, w, side, side));
    }
    Tensor::new(vec![t, c, side, side], out)
}
