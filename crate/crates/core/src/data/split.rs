//! Subject-disjoint stratified k-fold splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::spirometry::Label;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    /// Subject id to fold index.
    pub assignments: BTreeMap<String, usize>,
}

/// Assign every subject to one of `k` folds, stratified by label.
///
/// Each class is shuffled with the seed and dealt round-robin, the second
/// class continuing where the first stopped, so fold sizes differ by at
/// most one and each fold's per-class count is within one of its share.
pub fn subject_kfold(
    subjects: &[String],
    labels: &[Label],
    k: usize,
    seed: u64,
) -> Result<FoldSplit> {
    if subjects.len() != labels.len() {
        return Err(PulmoError::dim(
            "subject labels",
            subjects.len(),
            labels.len(),
        ));
    }
    if k < 2 {
        return Err(PulmoError::Config(format!("k must be >= 2, got {k}")));
    }
    if k > subjects.len() {
        return Err(PulmoError::Config(format!(
            "k = {k} exceeds the number of subjects ({})",
            subjects.len()
        )));
    }
    let unique: BTreeSet<&String> = subjects.iter().collect();
    if unique.len() != subjects.len() {
        return Err(PulmoError::Config(
            "duplicate subject ids in split input".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0usize;
    for class in [Label::Normal, Label::Abnormal] {
        // sort first so the result does not depend on input order
        let mut ids: Vec<&String> = subjects
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(s, _)| s)
            .collect();
        ids.sort();
        ids.shuffle(&mut rng);
        for id in ids {
            assignments.insert(id.clone(), next % k);
            next += 1;
        }
    }
    let split = FoldSplit {
        k,
        seed,
        assignments,
    };
    split.assert_disjoint()?;
    Ok(split)
}

impl FoldSplit {
    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    /// `(train, test)` subject ids for one fold, both sorted.
    pub fn train_test(&self, fold: usize) -> Result<(Vec<String>, Vec<String>)> {
        if fold >= self.k {
            return Err(PulmoError::Config(format!(
                "fold {fold} out of range for k = {}",
                self.k
            )));
        }
        let (test, train): (Vec<_>, Vec<_>) =
            self.assignments.iter().partition(|(_, &f)| f == fold);
        Ok((
            train.into_iter().map(|(s, _)| s.clone()).collect(),
            test.into_iter().map(|(s, _)| s.clone()).collect(),
        ))
    }

    /// Exhaustive check that no fold shares a subject between its train and
    /// test sets and that every subject is tested exactly once.
    pub fn assert_disjoint(&self) -> Result<()> {
        let mut tested = BTreeSet::new();
        for fold in 0..self.k {
            let (train, test) = self.train_test(fold)?;
            let train: BTreeSet<&String> = train.iter().collect();
            if let Some(s) = test.iter().find(|s| train.contains(s)) {
                return Err(PulmoError::Protocol(format!(
                    "subject `{s}` is in both train and test of fold {fold}"
                )));
            }
            for s in test {
                if !tested.insert(s.clone()) {
                    return Err(PulmoError::Protocol(format!("subject `{s}` tested twice")));
                }
            }
        }
        if tested.len() != self.assignments.len() {
            return Err(PulmoError::Protocol(
                "some subjects are never tested".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serialises");
        std::fs::write(path, json).map_err(|e| PulmoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PulmoError::io(path, e))?;
        let split: FoldSplit = serde_json::from_str(&text)
            .map_err(|e| PulmoError::Format(format!("{}: {e}", path.display())))?;
        if split.assignments.values().any(|&f| f >= split.k) {
            return Err(PulmoError::Format("fold index out of range".into()));
        }
        split.assert_disjoint()?;
        Ok(split)
    }
}
