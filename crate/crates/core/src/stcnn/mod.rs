//! X3D-style spatio-temporal CNN with metadata fusion.

mod attention;
mod layers;
mod net;
mod train;

use serde::{Deserialize, Serialize};

use crate::data::{CLIP_FRAMES, CLIP_SIDE};
use crate::error::{PulmoError, Result};

pub use attention::{embed_metadata, mha_fuse, Attention, AttentionTrace};
pub use layers::{Block, Conv3d, Dense};
pub use net::{build_net, StcnnNet, StcnnTrace};
pub use train::{
    cross_entropy, prepare_input, train_step, CnnSample, InputStats, Target, TargetScaler,
};

const BASE_WIDTHS: [usize; 3] = [16, 32, 64];
const BASE_DEPTH: usize = 2;

/// Expansion factors of the X3D family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionConfig {
    /// Temporal duration: fraction of the 30-frame clip fed to the net.
    pub gamma_t: f64,
    /// Frame rate: the net sees every `round(1 / gamma_tau)`-th frame.
    pub gamma_tau: f64,
    /// Spatial resolution relative to 224.
    pub gamma_s: f64,
    /// Channel width.
    pub gamma_w: f64,
    /// Bottleneck width relative to the stage width.
    pub gamma_b: f64,
    /// Blocks per stage relative to 2.
    pub gamma_d: f64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            gamma_t: 1.0,
            gamma_tau: 1.0,
            gamma_s: 1.0,
            gamma_w: 1.0,
            gamma_b: 2.25,
            gamma_d: 1.0,
        }
    }
}

fn scaled(base: usize, gamma: f64) -> usize {
    (base as f64 * gamma).round() as usize
}

impl ExpansionConfig {
    /// Small setting used for CPU experiments: 56x56 input, every second
    /// frame, half width, no bottleneck expansion.
    pub fn desk() -> Self {
        ExpansionConfig {
            gamma_t: 1.0,
            gamma_tau: 0.5,
            gamma_s: 0.25,
            gamma_w: 0.5,
            gamma_b: 1.0,
            gamma_d: 0.5,
        }
    }

    pub fn input_side(&self) -> usize {
        scaled(CLIP_SIDE, self.gamma_s)
    }

    /// Frames of the clip covered by the input window.
    pub fn window(&self) -> usize {
        scaled(CLIP_FRAMES, self.gamma_t)
    }

    pub fn frame_stride(&self) -> usize {
        ((1.0 / self.gamma_tau).round() as usize).max(1)
    }

    /// Frames actually fed to the net.
    pub fn frames_in(&self) -> usize {
        self.window().div_ceil(self.frame_stride())
    }

    pub fn stage_widths(&self) -> [usize; 3] {
        BASE_WIDTHS.map(|w| scaled(w, self.gamma_w))
    }

    pub fn blocks_per_stage(&self) -> usize {
        scaled(BASE_DEPTH, self.gamma_d)
    }

    pub fn bottleneck(&self, width: usize) -> usize {
        scaled(width, self.gamma_b)
    }

    pub fn validate(&self) -> Result<()> {
        let g = [
            ("gamma_t", self.gamma_t),
            ("gamma_tau", self.gamma_tau),
            ("gamma_s", self.gamma_s),
            ("gamma_w", self.gamma_w),
            ("gamma_b", self.gamma_b),
            ("gamma_d", self.gamma_d),
        ];
        if let Some((name, v)) = g.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(PulmoError::Config(format!(
                "{name} must be positive, got {v}"
            )));
        }
        if self.window() == 0 || self.window() > CLIP_FRAMES {
            return Err(PulmoError::Config(format!(
                "gamma_t {} gives a {}-frame window; clips have {CLIP_FRAMES}",
                self.gamma_t,
                self.window()
            )));
        }
        if self.input_side() < 8 {
            return Err(PulmoError::Config(format!(
                "gamma_s {} gives a {}-pixel input; need at least 8",
                self.gamma_s,
                self.input_side()
            )));
        }
        if self.blocks_per_stage() == 0 {
            return Err(PulmoError::Config(format!(
                "gamma_d {} leaves stages without blocks",
                self.gamma_d
            )));
        }
        for w in self.stage_widths() {
            if w == 0 {
                return Err(PulmoError::Config(format!(
                    "gamma_w {} gives a zero-width stage",
                    self.gamma_w
                )));
            }
            if self.bottleneck(w) == 0 {
                return Err(PulmoError::Config(format!(
                    "gamma_b {} gives a zero-width bottleneck",
                    self.gamma_b
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Video only.
    None,
    /// Concatenate pooled video features with the metadata embedding.
    Dense,
    /// Metadata-queried attention over video tokens, added to the mean
    /// token and concatenated with the metadata embedding.
    Mha,
}

impl std::str::FromStr for FusionMode {
    type Err = PulmoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(FusionMode::None),
            "dense" => Ok(FusionMode::Dense),
            "mha" => Ok(FusionMode::Mha),
            other => Err(PulmoError::Config(format!("unknown fusion `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Dense => "dense",
            FusionMode::Mha => "mha",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub d_model: usize,
    pub heads: usize,
    /// Temporal chunks the video features are pooled into.
    pub video_tokens: usize,
    /// Metadata features per subject.
    pub meta_features: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Mha,
            d_model: 64,
            heads: 4,
            video_tokens: 4,
            meta_features: crate::data::MetadataRecord::FEATURE_COUNT,
        }
    }
}

impl FusionConfig {
    pub fn with_mode(mode: FusionMode) -> Self {
        FusionConfig {
            mode,
            ..Default::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.video_tokens == 0 {
            return Err(PulmoError::Config(
                "d_model and video_tokens must be >= 1".into(),
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(PulmoError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.mode != FusionMode::None && self.meta_features == 0 {
            return Err(PulmoError::Config(format!(
                "{} fusion needs metadata features",
                self.mode
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Regression,
    Classification,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Regression => 1,
            HeadKind::Classification => 2,
        }
    }
}
