//! Loading clips at working resolution with their spirometry labels.

use std::collections::HashMap;

use crate::error::{PulmoError, Result};
use crate::eval::majority_vote;
use crate::numerics::Tensor;
use crate::parallel::map_indices;
use crate::spirometry::{classify, predicted_fev1_fvc, Label, ReferenceCoefficients, SpiroLabel};

use super::clip::load_clip;
use super::manifest::ManifestDataset;
use super::resize::resize_clip;
use super::synth::SynthDataset;
use super::{ClipStub, MetadataRecord, Modality, Session};

/// Anything that can hand out standardised clips by index.
pub trait ClipSource: Sync {
    fn stubs(&self) -> &[ClipStub];
    fn subjects(&self) -> Vec<MetadataRecord>;
    /// `[30, C, 224, 224]` clip for stub `i`.
    fn load(&self, i: usize) -> Result<Tensor>;
}

impl ClipSource for ManifestDataset {
    fn stubs(&self) -> &[ClipStub] {
        &self.clips
    }
    fn subjects(&self) -> Vec<MetadataRecord> {
        self.subjects.clone()
    }
    fn load(&self, i: usize) -> Result<Tensor> {
        load_clip(&self.clip_file(i))
    }
}

impl ClipSource for SynthDataset {
    fn stubs(&self) -> &[ClipStub] {
        &self.stubs
    }
    fn subjects(&self) -> Vec<MetadataRecord> {
        self.metadata()
    }
    fn load(&self, i: usize) -> Result<Tensor> {
        Ok(self.render(i))
    }
}

/// One breathing cycle at working resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Index into [`PreparedDataset::subjects`].
    pub subject: usize,
    pub session: Session,
    /// `[30, C, side, side]`, raw intensities.
    pub frames: Tensor,
    pub pef: f64,
    pub fev1: f64,
    pub fvc: f64,
    pub spiro: SpiroLabel,
}

impl Sample {
    /// Measured FEV1/FVC in percent.
    pub fn ratio_percent(&self) -> f64 {
        100.0 * self.fev1 / self.fvc
    }
}

#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub modality: Modality,
    pub side: usize,
    pub subjects: Vec<MetadataRecord>,
    /// Majority of the subject's cycle labels, ties to Abnormal.
    pub subject_labels: Vec<Label>,
    pub samples: Vec<Sample>,
}

/// Clips of one modality with their subject (index into `subjects`) and
/// spirometry label, in manifest order.
struct Labelled {
    subjects: Vec<MetadataRecord>,
    clips: Vec<(usize, usize, SpiroLabel)>,
}

fn label_clips(
    source: &dyn ClipSource,
    modality: Modality,
    coeffs: &ReferenceCoefficients,
) -> Result<Labelled> {
    let all = source.subjects();
    let index: HashMap<&str, usize> = all
        .iter()
        .enumerate()
        .map(|(i, s)| (s.subject_id.as_str(), i))
        .collect();
    let mut predicted = HashMap::new();
    let mut remap = HashMap::new();
    let mut subjects = Vec::new();
    let mut clips = Vec::new();
    for (i, stub) in source.stubs().iter().enumerate() {
        if stub.modality != modality {
            continue;
        }
        let &si = index.get(stub.subject_id.as_str()).ok_or_else(|| {
            PulmoError::Protocol(format!(
                "clip subject `{}` has no metadata",
                stub.subject_id
            ))
        })?;
        if let std::collections::hash_map::Entry::Vacant(e) = predicted.entry(si) {
            let m = &all[si];
            e.insert(predicted_fev1_fvc(
                m.age,
                m.height,
                m.sex,
                &m.group_id,
                coeffs,
            )?);
        }
        let local = *remap.entry(si).or_insert_with(|| {
            subjects.push(all[si].clone());
            subjects.len() - 1
        });
        let (pf1, pfvc) = predicted[&si];
        clips.push((
            i,
            local,
            classify(stub.measured_fev1, stub.measured_fvc, pf1, pfvc)?,
        ));
    }
    Ok(Labelled { subjects, clips })
}

fn vote(l: &Labelled) -> Result<Vec<Label>> {
    (0..l.subjects.len())
        .map(|s| {
            let cycles: Vec<Label> = l
                .clips
                .iter()
                .filter(|c| c.1 == s)
                .map(|c| c.2.label)
                .collect();
            majority_vote(&cycles)
        })
        .collect()
}

/// Subject ids with the majority of their cycle labels (ties to Abnormal),
/// without loading any clip.
pub fn subject_labels(
    source: &dyn ClipSource,
    modality: Modality,
    coeffs: &ReferenceCoefficients,
) -> Result<(Vec<String>, Vec<Label>)> {
    let l = label_clips(source, modality, coeffs)?;
    let labels = vote(&l)?;
    Ok((
        l.subjects.into_iter().map(|s| s.subject_id).collect(),
        labels,
    ))
}

/// Load every clip of `modality`, resize it to `side` and attach labels
/// computed with `coeffs`. Subjects without clips of that modality are
/// dropped.
pub fn prepare(
    source: &dyn ClipSource,
    modality: Modality,
    side: usize,
    coeffs: &ReferenceCoefficients,
) -> Result<PreparedDataset> {
    let l = label_clips(source, modality, coeffs)?;
    let subject_labels = vote(&l)?;
    let loaded = map_indices(l.clips.len(), |j| -> Result<Tensor> {
        let clip = source.load(l.clips[j].0)?;
        resize_clip(&clip, side)
    });
    let mut samples = Vec::with_capacity(l.clips.len());
    for (&(i, subject, spiro), frames) in l.clips.iter().zip(loaded) {
        let stub = &source.stubs()[i];
        samples.push(Sample {
            subject,
            session: stub.session,
            frames: frames?,
            pef: stub.measured_pef,
            fev1: stub.measured_fev1,
            fvc: stub.measured_fvc,
            spiro,
        });
    }
    Ok(PreparedDataset {
        modality,
        side,
        subjects: l.subjects,
        subject_labels,
        samples,
    })
}

impl PreparedDataset {
    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.subject_id == id)
    }

    /// Sample indices belonging to any of `ids`.
    pub fn samples_of(&self, ids: &[String]) -> Vec<usize> {
        let wanted: Vec<usize> = ids.iter().filter_map(|id| self.subject_index(id)).collect();
        (0..self.samples.len())
            .filter(|&i| wanted.contains(&self.samples[i].subject))
            .collect()
    }
}
