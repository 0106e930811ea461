use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;
use crate::optim::{Adam, Grads};
use crate::parallel::map_indices;
use crate::spirometry::Label;

use super::lif::SpikeTrain;
use super::net::{SpikingNet, N_CLASSES};

/// Target firing rates (fraction of timesteps) for the true and false class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRates {
    pub high: f32,
    pub low: f32,
}

impl Default for TargetRates {
    fn default() -> Self {
        TargetRates {
            high: 0.8,
            low: 0.2,
        }
    }
}

impl TargetRates {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(PulmoError::Config(format!(
                "target rates need 0 <= low < high <= 1, got ({}, {})",
                self.high, self.low
            )));
        }
        Ok(())
    }

    fn for_class(&self, label: usize, class: usize) -> f32 {
        if class == label {
            self.high
        } else {
            self.low
        }
    }
}

/// Mean over classes of `(count/T - target)^2`.
pub fn mse_count_loss(
    counts: &Tensor,
    label: usize,
    t: usize,
    targets: TargetRates,
) -> Result<f32> {
    if label >= N_CLASSES {
        return Err(PulmoError::Domain(format!(
            "class label {label} not in {{0,1}}"
        )));
    }
    counts.expect_shape("class spike counts", &[N_CLASSES])?;
    targets.validate()?;
    if t == 0 {
        return Err(PulmoError::Domain("timestep count must be >= 1".into()));
    }
    if let Some(c) = counts
        .data()
        .iter()
        .find(|&&c| !(0.0..=t as f32).contains(&c))
    {
        return Err(PulmoError::Domain(format!(
            "spike count {c} outside [0, {t}]"
        )));
    }
    Ok(count_loss_terms(counts.data(), label, t, targets).0)
}

/// Loss and its gradient with respect to each class count.
pub fn count_loss_terms(
    counts: &[f32],
    label: usize,
    t: usize,
    targets: TargetRates,
) -> (f32, Vec<f32>) {
    let tf = t as f32;
    let mut loss = 0.0;
    let mut grad = vec![0.0; N_CLASSES];
    for (c, (&n, g)) in counts.iter().zip(grad.iter_mut()).enumerate() {
        let err = n / tf - targets.for_class(label, c);
        loss += err * err;
        // d/dn of (1/C) (n/T - r)^2
        *g = 2.0 * err / (tf * N_CLASSES as f32);
    }
    (loss / N_CLASSES as f32, grad)
}

/// One rate-coded training example.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub video: SpikeTrain,
    pub meta: Option<SpikeTrain>,
    pub label: Label,
}

/// Loss and parameter gradients of a single sample.
pub fn sample_gradients(
    net: &SpikingNet,
    sample: &EncodedSample,
    targets: TargetRates,
) -> Result<(f32, Grads)> {
    let (counts, trace) = net.forward(&sample.video, sample.meta.as_ref())?;
    let label = sample.label.class_index();
    let (loss, dcounts) = count_loss_terms(counts.data(), label, trace.timesteps, targets);
    let grads = net.backward(&trace, &dcounts)?;
    Ok((loss, grads))
}

/// Surrogate-gradient BPTT over a mini-batch followed by one Adam update.
/// Returns the mean batch loss.
pub fn bptt_train_step(
    net: &mut SpikingNet,
    batch: &[EncodedSample],
    opt: &mut Adam,
    targets: TargetRates,
) -> Result<f32> {
    let Some(first) = batch.first() else {
        return Err(PulmoError::Domain("empty training batch".into()));
    };
    let t = first.video.timesteps();
    if let Some(s) = batch.iter().find(|s| s.video.timesteps() != t) {
        return Err(PulmoError::Protocol(format!(
            "batch mixes {t} and {} timesteps",
            s.video.timesteps()
        )));
    }
    let shared: &SpikingNet = net;
    let per_sample = map_indices(batch.len(), |i| {
        sample_gradients(shared, &batch[i], targets)
    });
    let mut losses = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    for r in per_sample {
        let (l, g) = r?;
        losses.push(l);
        parts.push(g);
    }
    let mut grads = Grads::sum_ordered(parts).expect("non-empty batch");
    grads.scale(1.0 / batch.len() as f32);
    grads.check_finite(&*net)?;
    opt.step(net, &grads);
    Ok(losses.iter().sum::<f32>() / batch.len() as f32)
}

/// Class decision from spike counts: argmax, ties go to Abnormal.
/// Confidence is `|count_0 - count_1| / T`.
pub fn decide(counts: &[f32], t: usize) -> (Label, f32) {
    let margin = (counts[0] - counts[1]).abs() / t as f32;
    let label = if counts[0] > counts[1] {
        Label::Normal
    } else {
        Label::Abnormal
    };
    (label, margin)
}

pub fn predict_cycle(
    net: &SpikingNet,
    video: &SpikeTrain,
    meta: Option<&SpikeTrain>,
) -> Result<(Label, f32)> {
    let (counts, trace) = net.forward(video, meta)?;
    Ok(decide(counts.data(), trace.timesteps))
}
