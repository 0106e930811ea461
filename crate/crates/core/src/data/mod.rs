//! Dataset records, ingestion, augmentation, splitting and synthetic data.

mod augment;
mod clip;
mod manifest;
mod prepared;
mod resize;
mod split;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::spirometry::Sex;

pub use augment::{
    add_noise, augment, flip_horizontal, pad_crop, scale_brightness, temporal_shift, AugmentPlan,
    Jitter, CROP_FRACTION,
};
pub use clip::{
    decode_clip, encode_clip, load_clip, read_clip, write_clip, CLIP_MAGIC, CLIP_VERSION,
};
pub use manifest::{load_manifest, load_metadata, ManifestDataset, MANIFEST_HEADER, METADATA_FILE};
pub use prepared::{prepare, subject_labels, ClipSource, PreparedDataset, Sample};
pub use resize::{area_downsample, resize_bilinear, resize_clip};
pub use split::{subject_kfold, FoldSplit};
pub use synth::{synth_generate, SynthConfig, SynthCycle, SynthDataset, SynthSubject, PEF_RANGE};

/// Frames per standardised clip.
pub const CLIP_FRAMES: usize = 30;
/// Side of a standardised clip frame.
pub const CLIP_SIDE: usize = 224;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Thermal,
    Rgb,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Thermal => 1,
            Modality::Rgb => 3,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Modality::Thermal => 0,
            Modality::Rgb => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Thermal),
            1 => Ok(Modality::Rgb),
            c => Err(PulmoError::Format(format!("unknown modality code {c}"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Thermal => "thermal",
            Modality::Rgb => "rgb",
        })
    }
}

impl FromStr for Modality {
    type Err = PulmoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "thermal" => Ok(Modality::Thermal),
            "rgb" => Ok(Modality::Rgb),
            other => Err(PulmoError::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Session {
    Rest,
    PostExercise,
}

impl fmt::Display for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Session::Rest => "rest",
            Session::PostExercise => "post_exercise",
        })
    }
}

impl FromStr for Session {
    type Err = PulmoError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rest" => Ok(Session::Rest),
            "post_exercise" => Ok(Session::PostExercise),
            other => Err(PulmoError::Config(format!("unknown session `{other}`"))),
        }
    }
}

/// Subject covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataRecord {
    pub subject_id: String,
    pub sex: Sex,
    /// Reference-equation group within the sex (e.g. an ethnicity table id).
    pub group_id: String,
    /// Years.
    pub age: f64,
    /// Centimetres.
    pub height: f64,
    /// Kilograms.
    pub weight: f64,
    /// Years.
    pub smoking_duration: f64,
    pub athlete: bool,
    pub seasonal_cough: bool,
    pub lung_past_problems: bool,
    pub lung_genetic_problems: bool,
}

impl MetadataRecord {
    pub const NUMERIC_FEATURES: [&'static str; 4] = ["age", "height", "weight", "smoking_duration"];
    pub const BOOLEAN_FEATURES: [&'static str; 5] = [
        "athlete",
        "seasonal_cough",
        "lung_past_problems",
        "lung_genetic_problems",
        "sex_male",
    ];
    pub const FEATURE_COUNT: usize = 9;

    pub fn numeric_values(&self) -> [f64; 4] {
        [self.age, self.height, self.weight, self.smoking_duration]
    }

    pub fn boolean_values(&self) -> [bool; 5] {
        [
            self.athlete,
            self.seasonal_cough,
            self.lung_past_problems,
            self.lung_genetic_problems,
            self.sex == Sex::Male,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.subject_id.trim().is_empty() {
            return Err(PulmoError::Domain("empty subject_id".into()));
        }
        for (name, v) in Self::NUMERIC_FEATURES.iter().zip(self.numeric_values()) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PulmoError::Domain(format!(
                    "subject {}: {name} must be finite and non-negative, got {v}",
                    self.subject_id
                )));
            }
        }
        Ok(())
    }
}

/// A manifest row: one breathing-cycle clip and its measured spirometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipStub {
    pub subject_id: String,
    pub modality: Modality,
    pub session: Session,
    pub clip_path: PathBuf,
    /// L/min.
    pub measured_pef: f64,
    /// Litres.
    pub measured_fev1: f64,
    /// Litres.
    pub measured_fvc: f64,
}

/// A loaded clip with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub stub: ClipStub,
    /// `[30, C, 224, 224]`.
    pub frames: crate::numerics::Tensor,
}
