//! Synthetic breathing-cycle videos.
//!
//! Each clip shows a static warm face and a Gaussian exhalation plume. The
//! plume is visible for a fraction of the 30 frames equal to the cycle's
//! FEV1/FVC percentage (the duty cycle), and its peak intensity maps
//! linearly onto the cycle's PEF. Plume drift direction, onset frame and a
//! per-cycle intensity gain are nuisances that the models must ignore.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;
use crate::spirometry::{
    classify, predicted_fev1_fvc, predicted_pef, Label, ReferenceCoefficients, Sex, SpiroLabel,
};

use super::clip::write_clip;
use super::manifest::write_manifest;
use super::{ClipStub, MetadataRecord, Modality, Session, CLIP_FRAMES, CLIP_SIDE};

/// PEF range covered by the intensity map, L/min.
pub const PEF_RANGE: (f64, f64) = (200.0, 650.0);
const GROUP: &str = "synthetic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub version: u32,
    pub modality: Modality,
    /// Fraction of subjects drawn Normal.
    pub normal_fraction: f64,
    /// Subject ratio percentages keep at least this distance from the
    /// threshold.
    pub label_margin: f64,
    /// Per-cycle standard deviation of the ratio percentage.
    pub ratio_cycle_sd: f64,
    /// Per-cycle relative standard deviation of PEF.
    pub pef_cycle_sd: f64,
    /// Per-cycle relative standard deviation of rendered plume intensity.
    pub gain_sd: f64,
    /// Relative standard deviation of a per-subject plume intensity factor
    /// (camera distance, skin temperature).
    pub subject_gain_sd: f64,
    /// Largest per-subject displacement of face and plume, in pixels at
    /// 224x224.
    pub subject_offset: f32,
    /// Plume intensity at the ends of [`PEF_RANGE`].
    pub amplitude_range: (f32, f32),
    pub background: f32,
    pub face_intensity: f32,
    pub noise_floor: f32,
    /// Plume width in pixels at 224x224.
    pub plume_sigma: f32,
    /// Sideways plume drift in pixels at full exhalation.
    pub plume_drift: f32,
    /// Exhalation fraction of the clip at ratio 50 and ratio 95 percent,
    /// interpolated linearly in between.
    pub duty_range: (f64, f64),
    /// Largest random onset offset in frames.
    pub onset_jitter: usize,
    /// Frames over which the plume ramps on and off.
    pub ramp_frames: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            version: 2,
            modality: Modality::Thermal,
            normal_fraction: 38.0 / 60.0,
            label_margin: 4.0,
            ratio_cycle_sd: 1.0,
            pef_cycle_sd: 0.03,
            gain_sd: 0.06,
            subject_gain_sd: 0.08,
            subject_offset: 0.0,
            amplitude_range: (0.25, 0.85),
            background: 0.1,
            face_intensity: 0.2,
            noise_floor: 0.02,
            plume_sigma: 22.0,
            plume_drift: 36.0,
            duty_range: (0.2, 0.9),
            onset_jitter: 4,
            ramp_frames: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn with_modality(modality: Modality) -> Self {
        SynthConfig {
            modality,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.version == 2
            && (0.0..=1.0).contains(&self.normal_fraction)
            && self.label_margin >= 0.0
            && self.label_margin < 20.0
            && self.ratio_cycle_sd >= 0.0
            && self.pef_cycle_sd >= 0.0
            && self.gain_sd >= 0.0
            && self.subject_gain_sd >= 0.0
            && (0.0..=32.0).contains(&self.subject_offset)
            && self.amplitude_range.0 < self.amplitude_range.1
            && self.noise_floor >= 0.0
            && self.plume_sigma > 0.0
            && self.ramp_frames > 0.0
            && 0.0 < self.duty_range.0
            && self.duty_range.0 < self.duty_range.1
            && self.duty_range.1 <= 1.0
            && self.onset_jitter < CLIP_FRAMES;
        if ok {
            Ok(())
        } else {
            Err(PulmoError::Config(format!(
                "invalid synthetic config {self:?}"
            )))
        }
    }

    /// Peak plume intensity for a PEF.
    pub fn amplitude_for_pef(&self, pef: f64) -> f32 {
        let (a0, a1) = self.amplitude_range;
        let u = ((pef - PEF_RANGE.0) / (PEF_RANGE.1 - PEF_RANGE.0)) as f32;
        a0 + (a1 - a0) * u
    }

    /// Exhalation length in frames for a ratio percentage.
    pub fn exhale_frames(&self, ratio_percent: f64) -> f32 {
        let (d0, d1) = self.duty_range;
        let u = ((ratio_percent - 50.0) / 45.0).clamp(0.0, 1.0);
        ((d0 + (d1 - d0) * u) * CLIP_FRAMES as f64) as f32
    }

    /// Inverse of [`amplitude_for_pef`](Self::amplitude_for_pef).
    pub fn pef_for_amplitude(&self, amplitude: f32) -> f64 {
        let (a0, a1) = self.amplitude_range;
        PEF_RANGE.0 + (PEF_RANGE.1 - PEF_RANGE.0) * f64::from((amplitude - a0) / (a1 - a0))
    }
}

/// Ground truth for one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSubject {
    pub metadata: MetadataRecord,
    pub ratio_percent: f64,
    pub pef: f64,
    pub predicted_fev1: f64,
    pub predicted_fvc: f64,
    pub fvc: f64,
    pub label: Label,
    /// Displacement of face and plume in pixels at 224x224.
    pub offset: (f32, f32),
    pub gain: f32,
}

/// Ground truth and nuisance draws for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCycle {
    pub subject: usize,
    pub session: Session,
    pub ratio_percent: f64,
    pub pef: f64,
    pub fev1: f64,
    pub fvc: f64,
    pub spiro: SpiroLabel,
    /// Frame where exhalation starts (the cycle wraps around).
    pub onset: usize,
    /// +1 drifts right, -1 left.
    pub direction: i8,
    pub gain: f32,
    pub noise_seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub subjects: Vec<SynthSubject>,
    pub cycles: Vec<SynthCycle>,
    pub stubs: Vec<ClipStub>,
    pub coefficients: ReferenceCoefficients,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite parameters")
}

fn draw_subject(
    i: usize,
    label: Label,
    cfg: &SynthConfig,
    coeffs: &ReferenceCoefficients,
    rng: &mut ChaCha8Rng,
) -> Result<SynthSubject> {
    let abnormal = label == Label::Abnormal;
    let sex = if rng.random_bool(0.5) {
        Sex::Male
    } else {
        Sex::Female
    };
    let age: f64 = rng.random_range(18.0..70.0);
    let height = match sex {
        Sex::Male => normal(177.0, 7.0).sample(rng).clamp(155.0, 200.0),
        Sex::Female => normal(164.0, 6.0).sample(rng).clamp(145.0, 185.0),
    };
    let bmi = normal(24.0, 3.0).sample(rng).clamp(18.0, 35.0);
    let weight = bmi * (height / 100.0).powi(2);
    let smoker = rng.random_bool(if abnormal { 0.6 } else { 0.2 });
    let smoking_duration = if smoker {
        rng.random_range(1.0..(age - 15.0).clamp(2.0, 35.0))
    } else {
        0.0
    };
    let metadata = MetadataRecord {
        subject_id: format!("S{:03}", i + 1),
        sex,
        group_id: GROUP.into(),
        age: (age * 10.0).round() / 10.0,
        height: (height * 10.0).round() / 10.0,
        weight: (weight * 10.0).round() / 10.0,
        smoking_duration: (smoking_duration * 10.0).round() / 10.0,
        athlete: rng.random_bool(if abnormal { 0.1 } else { 0.3 }),
        seasonal_cough: rng.random_bool(if abnormal { 0.5 } else { 0.15 }),
        lung_past_problems: rng.random_bool(if abnormal { 0.4 } else { 0.1 }),
        lung_genetic_problems: rng.random_bool(if abnormal { 0.25 } else { 0.05 }),
    };
    let m = &metadata;
    let ratio_percent = if abnormal {
        rng.random_range(50.0..=70.0 - cfg.label_margin)
    } else {
        rng.random_range(70.0 + cfg.label_margin..=95.0)
    };
    let (pf1, pfvc) = predicted_fev1_fvc(m.age, m.height, m.sex, &m.group_id, coeffs)?;
    let ppef = predicted_pef(m.age, m.height, m.sex, &m.group_id, coeffs)?;
    // obstruction lowers peak flow
    let flow = 0.55 + 0.45 * (ratio_percent - 50.0) / 45.0;
    let pef = (ppef * flow * normal(1.0, 0.05).sample(rng)).clamp(PEF_RANGE.0, PEF_RANGE.1);
    let fvc = pfvc * normal(0.97, 0.06).sample(rng).clamp(0.8, 1.15);
    let o = cfg.subject_offset;
    let offset = if o > 0.0 {
        (rng.random_range(-o..=o), rng.random_range(-o..=o))
    } else {
        (0.0, 0.0)
    };
    let gain = normal(1.0, cfg.subject_gain_sd.max(1e-12))
        .sample(rng)
        .clamp(0.7, 1.3) as f32;
    Ok(SynthSubject {
        metadata,
        ratio_percent,
        pef,
        predicted_fev1: pf1,
        predicted_fvc: pfvc,
        fvc,
        label,
        offset,
        gain,
    })
}

fn draw_cycle(
    subject: usize,
    s: &SynthSubject,
    session: Session,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SynthCycle> {
    let ratio_percent = (s.ratio_percent + normal(0.0, cfg.ratio_cycle_sd.max(1e-12)).sample(rng))
        .clamp(50.0, 95.0);
    let pef = (s.pef * normal(1.0, cfg.pef_cycle_sd.max(1e-12)).sample(rng))
        .clamp(PEF_RANGE.0, PEF_RANGE.1);
    let fvc = s.fvc * normal(1.0, 0.02).sample(rng);
    let fev1 = ratio_percent / 100.0 * (s.predicted_fev1 / s.predicted_fvc) * fvc;
    let spiro = classify(fev1, fvc, s.predicted_fev1, s.predicted_fvc)?;
    Ok(SynthCycle {
        subject,
        session,
        ratio_percent: spiro.ratio_percent,
        pef,
        fev1,
        fvc,
        spiro,
        onset: rng.random_range(0..=cfg.onset_jitter),
        direction: if rng.random_bool(0.5) { 1 } else { -1 },
        gain: normal(1.0, cfg.gain_sd.max(1e-12))
            .sample(rng)
            .clamp(0.7, 1.3) as f32,
        noise_seed: rng.random(),
    })
}

/// Draw subjects and cycles. Clips are rendered on demand by
/// [`SynthDataset::render`].
pub fn synth_generate(
    n_subjects: usize,
    cycles_per_subject: usize,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<SynthDataset> {
    cfg.validate()?;
    if n_subjects < 2 {
        return Err(PulmoError::Config(format!(
            "synthetic data needs at least 2 subjects, got {n_subjects}"
        )));
    }
    if cycles_per_subject == 0 {
        return Err(PulmoError::Config("cycles_per_subject must be >= 1".into()));
    }
    let coefficients = ReferenceCoefficients::synthetic();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_normal =
        ((n_subjects as f64 * cfg.normal_fraction).round() as usize).clamp(1, n_subjects - 1);
    let mut labels: Vec<Label> = (0..n_subjects)
        .map(|i| {
            if i < n_normal {
                Label::Normal
            } else {
                Label::Abnormal
            }
        })
        .collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), &mut rng);

    let mut subjects = Vec::with_capacity(n_subjects);
    let mut cycles = Vec::with_capacity(n_subjects * cycles_per_subject);
    let mut stubs = Vec::with_capacity(n_subjects * cycles_per_subject);
    for (i, &label) in labels.iter().enumerate() {
        let s = draw_subject(i, label, cfg, &coefficients, &mut rng)?;
        for c in 0..cycles_per_subject {
            let session = if 2 * c < cycles_per_subject {
                Session::Rest
            } else {
                Session::PostExercise
            };
            let cycle = draw_cycle(i, &s, session, cfg, &mut rng)?;
            stubs.push(ClipStub {
                subject_id: s.metadata.subject_id.clone(),
                modality: cfg.modality,
                session,
                clip_path: PathBuf::from("clips").join(format!(
                    "{}_{}_{c:03}.pfcl",
                    s.metadata.subject_id, cfg.modality
                )),
                measured_pef: cycle.pef,
                measured_fev1: cycle.fev1,
                measured_fvc: cycle.fvc,
            });
            cycles.push(cycle);
        }
        subjects.push(s);
    }
    Ok(SynthDataset {
        config: cfg.clone(),
        seed,
        subjects,
        cycles,
        stubs,
        coefficients,
    })
}

/// Plume visibility in [0,1] for frame `t` of a cycle exhaling for
/// `exhale` frames from `onset` (wrapping around the clip).
fn envelope(t: usize, onset: usize, exhale: f32, ramp: f32) -> f32 {
    let tau = ((t + CLIP_FRAMES - onset) % CLIP_FRAMES) as f32 + 0.5;
    (tau.min(exhale - tau) / ramp + 0.5).clamp(0.0, 1.0)
}

impl SynthDataset {
    pub fn metadata(&self) -> Vec<MetadataRecord> {
        self.subjects.iter().map(|s| s.metadata.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    /// Render clip `i` as `[30, C, 224, 224]` in [0,1].
    pub fn render(&self, i: usize) -> Tensor {
        let cfg = &self.config;
        let cy = &self.cycles[i];
        let n = CLIP_SIDE;
        let c = cfg.modality.channels();
        let exhale = cfg.exhale_frames(cy.ratio_percent);
        let subject = &self.subjects[cy.subject];
        let amp = cfg.amplitude_for_pef(cy.pef) * cy.gain * subject.gain;
        // RGB sees the plume as a faint tint
        let (tint, noise): (&[f32], f32) = match cfg.modality {
            Modality::Thermal => (&[1.0], cfg.noise_floor),
            Modality::Rgb => (&[0.45, 0.35, 0.25], 2.0 * cfg.noise_floor),
        };
        let base: &[f32] = match cfg.modality {
            Modality::Thermal => &[1.0],
            Modality::Rgb => &[0.9, 0.7, 0.6],
        };
        let (ox, oy) = subject.offset;
        let half = n as f32 / 2.0 + ox;
        let face: Vec<f32> = {
            let g = |v: usize, mu: f32, s: f32| (-((v as f32 - mu).powi(2)) / (2.0 * s * s)).exp();
            let gy: Vec<f32> = (0..n)
                .map(|y| g(y, 0.38 * n as f32 + oy, 0.25 * n as f32))
                .collect();
            let gx: Vec<f32> = (0..n).map(|x| g(x, half, 0.22 * n as f32)).collect();
            (0..n * n).map(|p| gy[p / n] * gx[p % n]).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(cy.noise_seed);
        let nd = Normal::new(0.0f32, noise.max(1e-12)).expect("finite noise");
        let mut data = Vec::with_capacity(CLIP_FRAMES * c * n * n);
        for t in 0..CLIP_FRAMES {
            let b = envelope(t, cy.onset, exhale, cfg.ramp_frames);
            let cx = half + f32::from(cy.direction) * cfg.plume_drift * b;
            let cyy = 0.66 * n as f32 + oy + 0.1 * n as f32 * b;
            let sigma = cfg.plume_sigma * (0.7 + 0.3 * b);
            let g = |v: usize, mu: f32| (-((v as f32 - mu).powi(2)) / (2.0 * sigma * sigma)).exp();
            let px: Vec<f32> = (0..n).map(|x| g(x, cx)).collect();
            let py: Vec<f32> = (0..n).map(|y| g(y, cyy)).collect();
            for ch in 0..c {
                let level = amp * b * tint[ch];
                for p in 0..n * n {
                    let v = cfg.background
                        + base[ch] * cfg.face_intensity * face[p]
                        + level * py[p / n] * px[p % n]
                        + nd.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Tensor::new(vec![CLIP_FRAMES, c, n, n], data).expect("consistent clip shape")
    }

    /// Emit `manifest.csv`, `metadata.json`, `coefficients.json`,
    /// `synth_config.json`, `ground_truth.json` and `clips/*.pfcl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let clips = dir.join("clips");
        std::fs::create_dir_all(&clips).map_err(|e| PulmoError::io(&clips, e))?;
        for (i, stub) in self.stubs.iter().enumerate() {
            write_clip(
                &dir.join(&stub.clip_path),
                self.config.modality,
                &self.render(i),
            )?;
        }
        write_manifest(dir, &self.stubs, &self.metadata())?;
        self.coefficients.save(&dir.join("coefficients.json"))?;
        let write_json = |name: &str, value: serde_json::Value| -> Result<()> {
            let p = dir.join(name);
            let text = serde_json::to_string_pretty(&value).expect("json serialises");
            std::fs::write(&p, text).map_err(|e| PulmoError::io(&p, e))
        };
        write_json(
            "synth_config.json",
            serde_json::json!({ "seed": self.seed, "config": self.config }),
        )?;
        write_json(
            "ground_truth.json",
            serde_json::json!({ "subjects": self.subjects, "cycles": self.cycles }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplitude_map_endpoints() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.amplitude_for_pef(200.0), cfg.amplitude_range.0);
        assert_eq!(cfg.pef_for_amplitude(cfg.amplitude_range.0), 200.0);
        assert!((cfg.pef_for_amplitude(cfg.amplitude_range.1) - 650.0).abs() < 1e-3);
    }

    #[test]
    fn envelope_duty() {
        let on: f32 = (0..CLIP_FRAMES).map(|t| envelope(t, 3, 21.0, 1.5)).sum();
        assert!((on - 21.0).abs() < 1.0, "{on}");
        assert_eq!(envelope(0, 3, 21.0, 1.5), 0.0);
        assert_eq!(envelope(12, 3, 21.0, 1.5), 1.0);
        // wraps around the clip end
        assert!(envelope(1, 20, 20.0, 1.5) > 0.99);
    }

    #[test]
    fn labels_follow_ratio_and_are_reproducible() {
        let cfg = SynthConfig::default();
        let a = synth_generate(6, 3, 42, &cfg).unwrap();
        let b = synth_generate(6, 3, 42, &cfg).unwrap();
        assert_eq!(a.cycles, b.cycles);
        assert_eq!(a.render(4), b.render(4));
        for cy in &a.cycles {
            let s = &a.subjects[cy.subject];
            assert_eq!(cy.spiro.label, s.label);
            assert!((PEF_RANGE.0..=PEF_RANGE.1).contains(&cy.pef));
        }
        assert!(a.subjects.iter().any(|s| s.label == Label::Normal));
        assert!(a.subjects.iter().any(|s| s.label == Label::Abnormal));
        assert!(synth_generate(1, 3, 0, &cfg).is_err());
    }

    #[test]
    fn rgb_clip_has_three_channels_in_range() {
        let d = synth_generate(2, 1, 1, &SynthConfig::with_modality(Modality::Rgb)).unwrap();
        let clip = d.render(0);
        assert_eq!(clip.shape(), &[30, 3, 224, 224]);
        assert!(clip.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
