//! Manifest ingestion.
//!
//! A directory holds `manifest.csv` (one row per clip) and `metadata.json`
//! (an array of subject records). Clip paths are relative to the manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{PulmoError, Result};

use super::{ClipStub, MetadataRecord, Modality, Session};

pub const MANIFEST_HEADER: [&str; 7] = [
    "subject_id",
    "modality",
    "session",
    "clip_path",
    "pef",
    "fev1",
    "fvc",
];
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Deserialize)]
struct Row {
    subject_id: String,
    modality: String,
    session: String,
    clip_path: String,
    pef: f64,
    fev1: f64,
    fvc: f64,
}

/// Clip stubs and subject metadata read from a manifest.
#[derive(Clone, Debug)]
pub struct ManifestDataset {
    /// Directory clip paths are resolved against.
    pub root: PathBuf,
    pub clips: Vec<ClipStub>,
    pub subjects: Vec<MetadataRecord>,
}

impl ManifestDataset {
    pub fn clip_file(&self, i: usize) -> PathBuf {
        self.root.join(&self.clips[i].clip_path)
    }
}

fn ingestion(row: usize, detail: impl Into<String>) -> PulmoError {
    PulmoError::Ingestion {
        row,
        detail: detail.into(),
    }
}

/// Load subject metadata. Records are numbered from 1 in errors.
pub fn load_metadata(path: &Path) -> Result<Vec<MetadataRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| PulmoError::io(path, e))?;
    let values: Vec<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| ingestion(0, format!("{}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.into_iter().enumerate() {
        let rec: MetadataRecord = serde_json::from_value(v)
            .map_err(|e| ingestion(i + 1, format!("metadata record: {e}")))?;
        rec.validate()
            .map_err(|e| ingestion(i + 1, e.to_string()))?;
        if !seen.insert(rec.subject_id.clone()) {
            return Err(ingestion(
                i + 1,
                format!("duplicate subject_id `{}`", rec.subject_id),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Load `manifest.csv` and the sibling metadata file. Rows are numbered by
/// file line (the header is line 1). The load fails as a whole on the first
/// orphan clip, missing clip file or schema violation.
pub fn load_manifest(path: &Path) -> Result<ManifestDataset> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let subjects = load_metadata(&root.join(METADATA_FILE))?;
    let known: HashSet<&str> = subjects.iter().map(|s| s.subject_id.as_str()).collect();

    let file = std::fs::File::open(path).map_err(|e| PulmoError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ingestion(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != MANIFEST_HEADER {
        return Err(ingestion(
            1,
            format!("header {header:?}, expected {MANIFEST_HEADER:?}"),
        ));
    }

    let mut clips = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| ingestion(line, e.to_string()))?;
        if !known.contains(row.subject_id.as_str()) {
            return Err(ingestion(
                line,
                format!("subject_id `{}` has no metadata record", row.subject_id),
            ));
        }
        let modality: Modality = row
            .modality
            .parse()
            .map_err(|e: PulmoError| ingestion(line, e.to_string()))?;
        let session: Session = row
            .session
            .parse()
            .map_err(|e: PulmoError| ingestion(line, e.to_string()))?;
        for (name, v) in [("pef", row.pef), ("fev1", row.fev1), ("fvc", row.fvc)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ingestion(line, format!("{name} must be positive, got {v}")));
            }
        }
        let clip_path = PathBuf::from(&row.clip_path);
        if !root.join(&clip_path).is_file() {
            return Err(ingestion(
                line,
                format!("clip file `{}` not found", row.clip_path),
            ));
        }
        clips.push(ClipStub {
            subject_id: row.subject_id,
            modality,
            session,
            clip_path,
            measured_pef: row.pef,
            measured_fev1: row.fev1,
            measured_fvc: row.fvc,
        });
    }
    if clips.is_empty() {
        log::warn!("manifest {} lists no clips", path.display());
    }
    log::info!(
        "loaded {} clips for {} subjects from {}",
        clips.len(),
        subjects.len(),
        path.display()
    );
    Ok(ManifestDataset {
        root,
        clips,
        subjects,
    })
}

/// Write a manifest and its metadata file into `dir`.
pub(crate) fn write_manifest(
    dir: &Path,
    clips: &[ClipStub],
    subjects: &[MetadataRecord],
) -> Result<()> {
    let meta_path = dir.join(METADATA_FILE);
    let json = serde_json::to_string_pretty(subjects).expect("metadata serialises");
    std::fs::write(&meta_path, json).map_err(|e| PulmoError::io(&meta_path, e))?;

    let path = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&path)
        .map_err(|e| PulmoError::Format(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| PulmoError::Format(format!("{}: {e}", path.display()));
    w.write_record(MANIFEST_HEADER).map_err(csv_err)?;
    for c in clips {
        w.write_record([
            c.subject_id.clone(),
            c.modality.to_string(),
            c.session.to_string(),
            c.clip_path.to_string_lossy().into_owned(),
            c.measured_pef.to_string(),
            c.measured_fev1.to_string(),
            c.measured_fvc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| PulmoError::io(&path, e))
}
