use std::collections::BTreeSet;

use crate::data::{subject_kfold, FoldSplit, PreparedDataset};
use crate::error::{PulmoError, Result};
use crate::experiment::{derive_seed, train_ensemble, CycleInput, ExperimentConfig, TrainedModel};
use crate::spirometry::Label;

use super::report::{EvalReport, FoldResult, PatientResult};
use super::{
    aggregate_regression, classification_metrics, ensemble_predict, majority_vote,
    regression_metrics, Prediction,
};

/// Refuse to go on if any training sample belongs to a test subject.
fn assert_no_leakage(
    split: &FoldSplit,
    fold: usize,
    data: &PreparedDataset,
    train: &[usize],
) -> Result<()> {
    split.assert_disjoint()?;
    let (_, test) = split.train_test(fold)?;
    let test: BTreeSet<&str> = test.iter().map(String::as_str).collect();
    for &i in train {
        let id = data.subjects[data.samples[i].subject].subject_id.as_str();
        if test.contains(id) {
            return Err(PulmoError::Protocol(format!(
                "fold {fold}: subject {id} appears in both training and test data"
            )));
        }
    }
    Ok(())
}

fn evaluate_fold(
    cfg: &ExperimentConfig,
    data: &PreparedDataset,
    split: &FoldSplit,
    fold: usize,
) -> Result<FoldResult> {
    let (train_ids, test_ids) = split.train_test(fold)?;
    let train = data.samples_of(&train_ids);
    assert_no_leakage(split, fold, data, &train)?;
    let members: Vec<TrainedModel> =
        train_ensemble(cfg, data, &train_ids, derive_seed(cfg.seed, &[fold as u64]))?;

    let classification = cfg.task.is_classification();
    let mut cycle_pred = Vec::new();
    let mut cycle_truth = Vec::new();
    let mut patients = Vec::new();
    for id in &test_ids {
        let idx = data.samples_of(std::slice::from_ref(id));
        if idx.is_empty() {
            continue;
        }
        let mut preds = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = &data.samples[i];
            let input = CycleInput {
                frames: &s.frames,
                meta: &data.subjects[s.subject],
                seed: derive_seed(cfg.seed, &[fold as u64, 0x7e57, i as u64]),
            };
            let p = ensemble_predict(&members, &input)?;
            let truth = if classification {
                Prediction::Label(s.spiro.label)
            } else {
                Prediction::Value(cfg.task.target(s))
            };
            preds.push(p);
            cycle_pred.push(p);
            cycle_truth.push(truth);
        }
        let truths = &cycle_truth[cycle_truth.len() - idx.len()..];
        let (truth, prediction) = if classification {
            (
                Prediction::Label(majority_vote(&labels(truths))?),
                Prediction::Label(majority_vote(&labels(&preds))?),
            )
        } else {
            (
                Prediction::Value(aggregate_regression(&values(truths))?),
                Prediction::Value(aggregate_regression(&values(&preds))?),
            )
        };
        patients.push(PatientResult {
            subject: id.clone(),
            cycles: idx.len(),
            truth,
            prediction,
        });
    }
    if patients.is_empty() {
        return Err(PulmoError::Domain("no test cycles in this fold".into()));
    }
    let pt: Vec<Prediction> = patients.iter().map(|p| p.truth).collect();
    let pp: Vec<Prediction> = patients.iter().map(|p| p.prediction).collect();
    let mut result = FoldResult {
        fold,
        train_subjects: train_ids,
        test_subjects: patients.iter().map(|p| p.subject.clone()).collect(),
        test_cycles: cycle_pred.len(),
        cycle_classification: None,
        patient_classification: None,
        cycle_regression: None,
        patient_regression: None,
        patients,
    };
    if classification {
        result.cycle_classification = Some(classification_metrics(
            &labels(&cycle_pred),
            &labels(&cycle_truth),
        )?);
        result.patient_classification = Some(classification_metrics(&labels(&pp), &labels(&pt))?);
    } else {
        result.cycle_regression = Some(regression_metrics(
            &values(&cycle_pred),
            &values(&cycle_truth),
        )?);
        result.patient_regression = Some(regression_metrics(&values(&pp), &values(&pt))?);
    }
    log::info!("fold {fold} done: {} test cycles", result.test_cycles);
    Ok(result)
}

fn labels(p: &[Prediction]) -> Vec<Label> {
    p.iter()
        .filter_map(|x| match x {
            Prediction::Label(l) => Some(*l),
            Prediction::Value(_) => None,
        })
        .collect()
}

fn values(p: &[Prediction]) -> Vec<f64> {
    p.iter()
        .filter_map(|x| match x {
            Prediction::Value(v) => Some(*v),
            Prediction::Label(_) => None,
        })
        .collect()
}

/// Subject-wise k-fold cross-validation of `cfg` on a dataset prepared at
/// `cfg.input_side()`. Encoder statistics are fitted on each fold's training
/// subjects only.
pub fn run_crossval(cfg: &ExperimentConfig, data: &PreparedDataset) -> Result<EvalReport> {
    cfg.validate()?;
    if data.modality != cfg.modality {
        return Err(PulmoError::Config(format!(
            "dataset holds {} clips but the experiment asks for {}",
            data.modality, cfg.modality
        )));
    }
    let split = subject_kfold(&data.subject_ids(), &data.subject_labels, cfg.k, cfg.seed)?;
    let folds = (0..cfg.k)
        .map(|fold| {
            evaluate_fold(cfg, data, &split, fold).map_err(|e| PulmoError::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::assemble(
        cfg.task,
        cfg.modality,
        cfg.k,
        cfg.seed,
        cfg.ensemble_size,
        cfg.fingerprint(),
        folds,
    ))
}
