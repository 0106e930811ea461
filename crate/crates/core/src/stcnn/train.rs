//! Input preparation, losses and the optimisation step for [`StcnnNet`].

use serde::{Deserialize, Serialize};

use crate::data::CLIP_FRAMES;
use crate::error::{PulmoError, Result};
use crate::numerics::{softmax_slice, Tensor};
use crate::optim::{Adam, Grads};
use crate::parallel::map_indices;

use super::net::StcnnNet;
use super::{ExpansionConfig, HeadKind};

/// Per-channel pixel mean and standard deviation of the training clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputStats {
    /// Fit on `[T, C, H, W]` clips.
    pub fn fit<'a>(clips: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for clip in clips {
            clip.expect_rank("clip [T,C,H,W]", 4)?;
            let c = clip.dim(1);
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0); c];
            } else if sums.len() != c {
                return Err(PulmoError::dim("clip channels", sums.len(), c));
            }
            let hw = clip.dim(2) * clip.dim(3);
            for (i, plane) in clip.data().chunks_exact(hw).enumerate() {
                let s = &mut sums[i % c];
                for &v in plane {
                    s.0 += f64::from(v);
                    s.1 += f64::from(v) * f64::from(v);
                }
                s.2 += hw;
            }
        }
        if sums.is_empty() {
            return Err(PulmoError::Domain(
                "input statistics need at least one clip".into(),
            ));
        }
        let (mean, std) = sums
            .iter()
            .map(|&(s, s2, n)| {
                let m = s / n as f64;
                let var = (s2 / n as f64 - m * m).max(0.0);
                let sd = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
                (m as f32, sd as f32)
            })
            .unzip();
        Ok(InputStats { mean, std })
    }
}

/// Select the temporal window of a `[30, C, S, S]` clip, subsample it by the
/// frame stride, standardise each channel and lay it out as `[C, T, S, S]`.
pub fn prepare_input(frames: &Tensor, exp: &ExpansionConfig, stats: &InputStats) -> Result<Tensor> {
    frames.expect_rank("clip [T,C,H,W]", 4)?;
    let s = frames.shape();
    let (t_all, c, h, w) = (s[0], s[1], s[2], s[3]);
    if t_all != CLIP_FRAMES {
        return Err(PulmoError::dim("clip frames", CLIP_FRAMES, t_all));
    }
    let side = exp.input_side();
    if h != side || w != side {
        return Err(PulmoError::dim(
            "clip side for gamma_s",
            side,
            format!("{h}x{w}"),
        ));
    }
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(PulmoError::dim("input stats channels", c, stats.mean.len()));
    }
    let start = (CLIP_FRAMES - exp.window()) / 2;
    let picked: Vec<usize> = (start..start + exp.window())
        .step_by(exp.frame_stride())
        .collect();
    let hw = h * w;
    let mut out = Vec::with_capacity(c * picked.len() * hw);
    for ch in 0..c {
        let (m, sd) = (stats.mean[ch], stats.std[ch]);
        for &t in &picked {
            let plane = &frames.outer(t)[ch * hw..(ch + 1) * hw];
            out.extend(plane.iter().map(|&v| (v - m) / sd));
        }
    }
    Tensor::new(vec![c, picked.len(), h, w], out)
}

/// Standardisation of regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(PulmoError::Domain(
                "target scaler needs at least one value".into(),
            ));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        Ok(TargetScaler { mean, std })
    }

    pub fn scale(&self, v: f64) -> f32 {
        ((v - self.mean) / self.std) as f32
    }

    pub fn unscale(&self, v: f32) -> f64 {
        f64::from(v) * self.std + self.mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    /// Scaled regression target.
    Value(f32),
    Class(usize),
}

#[derive(Clone, Debug)]
pub struct CnnSample {
    /// `[C, T, H, W]` from [`prepare_input`].
    pub input: Tensor,
    pub meta: Option<Vec<f32>>,
    pub target: Target,
}

/// Softmax cross-entropy and its gradient at the logits.
pub fn cross_entropy(logits: &[f32], class: usize) -> Result<(f32, Vec<f32>)> {
    if class >= logits.len() {
        return Err(PulmoError::Domain(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let p = softmax_slice(logits)?;
    let loss = -(p[class].max(1e-12)).ln();
    let mut g = p;
    g[class] -= 1.0;
    Ok((loss, g))
}

fn sample_grads(net: &StcnnNet, s: &CnnSample) -> Result<(f32, Grads)> {
    let trace = net.forward(&s.input, s.meta.as_deref())?;
    let (loss, g_out) = match (net.head_kind(), s.target) {
        (HeadKind::Regression, Target::Value(y)) => {
            let e = trace.output[0] - y;
            (e * e, vec![2.0 * e])
        }
        (HeadKind::Classification, Target::Class(c)) => cross_entropy(&trace.output, c)?,
        (kind, t) => {
            return Err(PulmoError::Protocol(format!(
                "{kind:?} head cannot train on target {t:?}"
            )))
        }
    };
    Ok((loss, net.backward(&trace, &g_out)?))
}

/// Mean loss over the batch followed by one Adam update.
pub fn train_step(net: &mut StcnnNet, batch: &[CnnSample], opt: &mut Adam) -> Result<f32> {
    if batch.is_empty() {
        return Err(PulmoError::Domain("empty training batch".into()));
    }
    let shared: &StcnnNet = net;
    let results = map_indices(batch.len(), |i| sample_grads(shared, &batch[i]));
    let mut loss = 0.0;
    let mut parts = Vec::with_capacity(batch.len());
    for r in results {
        let (l, g) = r?;
        loss += l;
        parts.push(g);
    }
    let mut grads = Grads::sum_ordered(parts).expect("non-empty batch");
    grads.scale(1.0 / batch.len() as f32);
    grads.check_finite(&*net)?;
    opt.step(net, &grads);
    Ok(loss / batch.len() as f32)
}
