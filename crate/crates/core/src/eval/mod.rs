//! Metrics, patient-wise aggregation, ensembles and the cross-validation
//! runner.

mod crossval;
mod report;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};
use crate::spirometry::Label;

pub use crossval::run_crossval;
pub use report::{
    ClassificationSummary, EvalReport, FoldResult, MetricSummary, PatientResult, RegressionSummary,
};

/// Binary classification metrics with Abnormal as the positive class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when a metric had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rel_rmse: f64,
    pub rel_mae: f64,
    /// `None` when either series has zero variance.
    pub pearson: Option<f64>,
}

pub fn classification_metrics(preds: &[Label], truth: &[Label]) -> Result<ClassificationMetrics> {
    if preds.len() != truth.len() {
        return Err(PulmoError::dim(
            "prediction count",
            truth.len(),
            preds.len(),
        ));
    }
    if preds.is_empty() {
        return Err(PulmoError::Domain(
            "classification metrics need at least one label".into(),
        ));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in preds.iter().zip(truth) {
        match (p, t) {
            (Label::Abnormal, Label::Abnormal) => tp += 1,
            (Label::Abnormal, Label::Normal) => fp += 1,
            (Label::Normal, Label::Abnormal) => fneg += 1,
            (Label::Normal, Label::Normal) => tn += 1,
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let recall = ratio(tp, tp + fneg);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(ClassificationMetrics {
        recall,
        precision,
        f1,
        accuracy: (tp + tn) as f64 / preds.len() as f64,
        degenerate,
    })
}

/// Sample Pearson correlation. Errors when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PulmoError::dim("series length", a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(PulmoError::Domain(
            "correlation needs at least two points".into(),
        ));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(PulmoError::Domain(
            "correlation undefined for a constant series".into(),
        ));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Errors relative to the mean of the ground truth.
pub fn regression_metrics(preds: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != truth.len() {
        return Err(PulmoError::dim(
            "prediction count",
            truth.len(),
            preds.len(),
        ));
    }
    if preds.len() < 2 {
        return Err(PulmoError::Domain(
            "regression metrics need at least two values".into(),
        ));
    }
    let n = truth.len() as f64;
    let mean_t = truth.iter().sum::<f64>() / n;
    if !(mean_t > 0.0) {
        return Err(PulmoError::Domain(format!(
            "relative errors need a positive mean truth, got {mean_t}"
        )));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    Ok(RegressionMetrics {
        rel_rmse: (se / n).sqrt() / mean_t,
        rel_mae: ae / n / mean_t,
        pearson: pearson(preds, truth).ok(),
    })
}

/// Most frequent label; an exact tie goes to Abnormal.
pub fn majority_vote(labels: &[Label]) -> Result<Label> {
    if labels.is_empty() {
        return Err(PulmoError::Domain("majority vote over no labels".into()));
    }
    let abnormal = labels.iter().filter(|&&l| l == Label::Abnormal).count();
    Ok(if 2 * abnormal >= labels.len() {
        Label::Abnormal
    } else {
        Label::Normal
    })
}

/// Mean of one participant's cycle predictions.
pub fn aggregate_regression(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(PulmoError::Domain(
            "no cycle predictions to aggregate".into(),
        ));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Serialised as a bare label string or number.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Label(Label),
    Value(f64),
}

/// Anything that maps an input to a [`Prediction`].
pub trait Predictor<I: ?Sized> {
    fn predict(&self, input: &I) -> Result<Prediction>;
}

/// Majority vote over member labels or the mean of member values.
pub fn ensemble_predict<I: ?Sized, M: Predictor<I>>(models: &[M], input: &I) -> Result<Prediction> {
    if models.is_empty() {
        return Err(PulmoError::Config(
            "an ensemble needs at least one member".into(),
        ));
    }
    let preds = models
        .iter()
        .map(|m| m.predict(input))
        .collect::<Result<Vec<_>>>()?;
    combine(&preds)
}

/// Combine member predictions as [`ensemble_predict`] does.
pub fn combine(preds: &[Prediction]) -> Result<Prediction> {
    let labels: Vec<Label> = preds
        .iter()
        .filter_map(|p| match p {
            Prediction::Label(l) => Some(*l),
            Prediction::Value(_) => None,
        })
        .collect();
    if labels.len() == preds.len() {
        return majority_vote(&labels).map(Prediction::Label);
    }
    if labels.is_empty() {
        let values: Vec<f64> = preds
            .iter()
            .map(|p| match p {
                Prediction::Value(v) => *v,
                Prediction::Label(_) => unreachable!(),
            })
            .collect();
        return aggregate_regression(&values).map(Prediction::Value);
    }
    Err(PulmoError::Config(
        "ensemble mixes classifiers and regressors".into(),
    ))
}

/// Median wall time of `repeats` calls of `f`, after one untimed warm-up call.
pub fn timing_probe<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<Duration> {
    if repeats == 0 {
        return Err(PulmoError::Config(
            "timing probe needs at least one repeat".into(),
        ));
    }
    f()?;
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        runs.push(t.elapsed());
    }
    Ok(median(&mut runs))
}

/// Lower median for even lengths.
pub fn median(runs: &mut [Duration]) -> Duration {
    runs.sort_unstable();
    runs[(runs.len() - 1) / 2]
}
