//! Rate coding of video frames and subject metadata into spike trains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MetadataRecord;
use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;
use crate::snn::SpikeTrain;

/// Spike probabilities for boolean features and the clip applied to every
/// metadata probability.
pub const META_P_MIN: f32 = 0.05;
pub const META_P_MAX: f32 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub timesteps_per_frame: usize,
    pub seed: u64,
    /// Metadata timesteps; `None` matches the video length.
    pub metadata_t: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            timesteps_per_frame: 1,
            seed: 0,
            metadata_t: None,
        }
    }
}

impl EncoderConfig {
    pub fn with_seed(seed: u64) -> Self {
        EncoderConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timesteps_per_frame == 0 {
            return Err(PulmoError::Config(
                "timesteps_per_frame must be >= 1".into(),
            ));
        }
        if self.metadata_t == Some(0) {
            return Err(PulmoError::Config("metadata_t must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-clip min-max scaling to [0, 1]. A constant clip maps to 0.5.
pub fn normalize_clip(clip: &Tensor) -> Result<Tensor> {
    clip.expect_rank("clip [T,C,H,W]", 4)?;
    clip.check_finite("clip pixels")?;
    let (lo, hi) = (clip.min(), clip.max());
    let mut out = clip.clone();
    if hi > lo {
        let span = hi - lo;
        out.data_mut()
            .iter_mut()
            .for_each(|x| *x = (*x - lo) / span);
    } else {
        out.fill(0.5);
    }
    Ok(out)
}

/// Bernoulli rate coding: every element of every frame fires independently
/// with probability equal to its value, `timesteps_per_frame` times per
/// frame. Output has `frames * timesteps_per_frame` timesteps.
pub fn rate_encode(normalized: &Tensor, cfg: &EncoderConfig) -> Result<SpikeTrain> {
    cfg.validate()?;
    if normalized.rank() < 2 {
        return Err(PulmoError::dim(
            "rate_encode input rank",
            ">= 2",
            normalized.rank(),
        ));
    }
    if let Some(v) = normalized.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(PulmoError::Domain(format!(
            "rate coding needs probabilities in [0,1], found {v}"
        )));
    }
    let frames = normalized.dim(0);
    let reps = cfg.timesteps_per_frame;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shape = normalized.shape().to_vec();
    shape[0] = frames * reps;
    let mut out = Vec::with_capacity(normalized.len() * reps);
    for f in 0..frames {
        let p = normalized.outer(f);
        for _ in 0..reps {
            out.extend(p.iter().map(|&pi| bernoulli(&mut rng, pi)));
        }
    }
    Ok(SpikeTrain::from_binary_unchecked(Tensor::new(shape, out)?))
}

#[inline]
fn bernoulli(rng: &mut ChaCha8Rng, p: f32) -> f32 {
    // random::<f32>() is in [0, 1): p = 0 never fires, p = 1 always fires
    if rng.random::<f32>() < p {
        1.0
    } else {
        0.0
    }
}

/// Min/max of one numeric metadata feature over the training subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

/// Normalisation statistics fitted on training-fold subjects only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub ranges: Vec<FeatureRange>,
}

impl NormStats {
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a MetadataRecord>) -> Result<Self> {
        let mut ranges: Vec<FeatureRange> = MetadataRecord::NUMERIC_FEATURES
            .iter()
            .map(|n| FeatureRange {
                name: (*n).to_string(),
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            })
            .collect();
        let mut n = 0;
        for r in records {
            n += 1;
            for (range, v) in ranges.iter_mut().zip(r.numeric_values()) {
                range.min = range.min.min(v);
                range.max = range.max.max(v);
            }
        }
        if n == 0 {
            return Err(PulmoError::Domain(
                "normalisation stats need at least one training subject".into(),
            ));
        }
        Ok(NormStats { ranges })
    }

    fn range(&self, name: &str) -> Result<&FeatureRange> {
        self.ranges
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| PulmoError::Ingestion {
                row: 0,
                detail: format!("normalisation stats lack feature `{name}`"),
            })
    }

    /// Features scaled to [0,1] by the training range (values outside the
    /// range are clamped; a degenerate range maps to 0.5) followed by the
    /// boolean features as 0/1.
    pub fn normalize(&self, record: &MetadataRecord) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(MetadataRecord::FEATURE_COUNT);
        for (name, v) in MetadataRecord::NUMERIC_FEATURES
            .iter()
            .zip(record.numeric_values())
        {
            let r = self.range(name)?;
            let x = if r.max > r.min {
                ((v - r.min) / (r.max - r.min)).clamp(0.0, 1.0)
            } else {
                0.5
            };
            out.push(x as f32);
        }
        out.extend(
            record
                .boolean_values()
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 }),
        );
        Ok(out)
    }
}

/// Firing probability of every metadata feature, clipped to
/// [`META_P_MIN`, `META_P_MAX`].
pub fn metadata_probabilities(record: &MetadataRecord, stats: &NormStats) -> Result<Vec<f32>> {
    Ok(stats
        .normalize(record)?
        .into_iter()
        .map(|p| p.clamp(META_P_MIN, META_P_MAX))
        .collect())
}

/// Rate-code one subject's metadata over `metadata_t` timesteps
/// (default `default_t`).
pub fn encode_metadata(
    record: &MetadataRecord,
    stats: &NormStats,
    cfg: &EncoderConfig,
    default_t: usize,
) -> Result<SpikeTrain> {
    cfg.validate()?;
    let p = metadata_probabilities(record, stats)?;
    let t = cfg.metadata_t.unwrap_or(default_t);
    if t == 0 {
        return Err(PulmoError::Config("metadata timesteps must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(t * p.len());
    for _ in 0..t {
        out.extend(p.iter().map(|&pi| bernoulli(&mut rng, pi)));
    }
    Ok(SpikeTrain::from_binary_unchecked(Tensor::new(
        vec![t, p.len()],
        out,
    )?))
}
