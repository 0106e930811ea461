//! Spatial and temporal clip augmentation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::Tensor;

use super::Modality;

/// Crops move the frame by up to half of `1 - CROP_FRACTION` of its side
/// each way (12 of 224 pixels).
pub const CROP_FRACTION: f64 = 200.0 / 224.0;
const THERMAL_NOISE_SIGMA: f32 = 0.02;
const SHIFTS: [i32; 4] = [-2, -1, 1, 2];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Jitter {
    /// Multiply every pixel.
    Brightness(f32),
    /// Additive Gaussian noise drawn from this seed.
    Noise { sigma: f32, seed: u64 },
}

/// One draw of the augmentation menu. The default plan is a no-op.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub flip: bool,
    /// Top-left corner of the frame-sized window in the edge-padded frame.
    pub crop: Option<(usize, usize)>,
    /// Circular shift in frames; 0 for none.
    pub shift: i32,
    pub jitter: Option<Jitter>,
}

impl AugmentPlan {
    /// Draw every transform independently with probability 0.5.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, modality: Modality, side: usize) -> Self {
        let flip = rng.random_bool(0.5);
        let crop = if rng.random_bool(0.5) {
            let m = 2 * crop_pad(side);
            Some((rng.random_range(0..=m), rng.random_range(0..=m)))
        } else {
            None
        };
        let shift = if rng.random_bool(0.5) {
            SHIFTS[rng.random_range(0..SHIFTS.len())]
        } else {
            0
        };
        let jitter = if rng.random_bool(0.5) {
            Some(match modality {
                Modality::Rgb => Jitter::Brightness(rng.random_range(0.8..=1.2)),
                Modality::Thermal => Jitter::Noise {
                    sigma: THERMAL_NOISE_SIGMA,
                    seed: rng.random(),
                },
            })
        } else {
            None
        };
        AugmentPlan {
            flip,
            crop,
            shift,
            jitter,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == AugmentPlan::default()
    }

    /// Apply to a `[T, C, H, W]` clip in [0,1]; the result is clamped to [0,1].
    pub fn apply(&self, clip: &Tensor) -> Result<Tensor> {
        clip.expect_rank("clip [T,C,H,W]", 4)?;
        if self.is_identity() {
            return Ok(clip.clone());
        }
        let mut out = clip.clone();
        if self.flip {
            out = flip_horizontal(&out)?;
        }
        if let Some((y0, x0)) = self.crop {
            out = pad_crop(&out, y0, x0, crop_pad(out.dim(2).min(out.dim(3))))?;
        }
        if self.shift != 0 {
            out = temporal_shift(&out, self.shift)?;
        }
        match self.jitter {
            Some(Jitter::Brightness(s)) => scale_brightness(&mut out, s),
            Some(Jitter::Noise { sigma, seed }) => add_noise(&mut out, sigma, seed),
            None => {}
        }
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(out)
    }
}

fn crop_pad(side: usize) -> usize {
    let c = ((side as f64 * CROP_FRACTION).round() as usize).clamp(1, side);
    (side - c) / 2
}

/// Draw and apply a plan.
pub fn augment<R: Rng + ?Sized>(clip: &Tensor, modality: Modality, rng: &mut R) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    let side = clip.dim(2).min(clip.dim(3));
    AugmentPlan::draw(rng, modality, side).apply(clip)
}

pub fn flip_horizontal(clip: &Tensor) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    let w = clip.dim(3);
    let mut out = clip.clone();
    out.data_mut()
        .chunks_exact_mut(w)
        .for_each(|row| row.reverse());
    Ok(out)
}

/// Pad every plane by `pad` pixels of edge replication and crop a
/// frame-sized window at `(y0, x0)`. Scale is unchanged, so plume size and
/// intensity survive; `(pad, pad)` is the identity.
pub fn pad_crop(clip: &Tensor, y0: usize, x0: usize, pad: usize) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    let (h, w) = (clip.dim(2), clip.dim(3));
    if y0 > 2 * pad || x0 > 2 * pad {
        return Err(crate::error::PulmoError::dim(
            "crop corner",
            format!("within 0..={}", 2 * pad),
            format!("({y0},{x0})"),
        ));
    }
    let src = |i: usize, corner: usize, n: usize| (i + corner).saturating_sub(pad).min(n - 1);
    let cols: Vec<usize> = (0..w).map(|x| src(x, x0, w)).collect();
    let mut data = Vec::with_capacity(clip.len());
    for plane in clip.data().chunks_exact(h * w) {
        for y in 0..h {
            let row = &plane[src(y, y0, h) * w..][..w];
            data.extend(cols.iter().map(|&x| row[x]));
        }
    }
    Tensor::new(clip.shape().to_vec(), data)
}

/// Circular shift along time: output frame `t` is input frame `t - k`.
pub fn temporal_shift(clip: &Tensor, k: i32) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    let t = clip.dim(0) as i64;
    let mut out = clip.clone();
    let r = (k as i64).rem_euclid(t) as usize;
    let frame = clip.len() / clip.dim(0);
    out.data_mut().rotate_right(r * frame);
    Ok(out)
}

pub fn scale_brightness(clip: &mut Tensor, s: f32) {
    clip.scale(s);
}

pub fn add_noise(clip: &mut Tensor, sigma: f32, seed: u64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0f32, sigma).expect("finite sigma");
    clip.data_mut()
        .iter_mut()
        .for_each(|v| *v += n.sample(&mut rng));
}
