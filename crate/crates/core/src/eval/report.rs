use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{PulmoError, Result};
use crate::experiment::Task;

use super::{ClassificationMetrics, Prediction, RegressionMetrics};

/// One metric across folds. Mean and population standard deviation are
/// taken over the folds where the metric is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_fold: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl MetricSummary {
    pub fn from_folds(per_fold: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = per_fold.iter().flatten().copied().collect();
        let (mean, std) = if defined.is_empty() {
            (None, None)
        } else {
            let n = defined.len() as f64;
            let m = defined.iter().sum::<f64>() / n;
            let var = defined.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            (Some(m), Some(var.sqrt()))
        };
        MetricSummary {
            per_fold,
            mean,
            std,
        }
    }

    fn cell(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "n/a".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSummary {
    pub recall: MetricSummary,
    pub precision: MetricSummary,
    pub f1: MetricSummary,
    pub accuracy: MetricSummary,
}

impl ClassificationSummary {
    fn from_folds(folds: &[ClassificationMetrics]) -> Self {
        let pick = |f: fn(&ClassificationMetrics) -> f64| {
            MetricSummary::from_folds(folds.iter().map(|m| Some(f(m))).collect())
        };
        ClassificationSummary {
            recall: pick(|m| m.recall),
            precision: pick(|m| m.precision),
            f1: pick(|m| m.f1),
            accuracy: pick(|m| m.accuracy),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub rel_rmse: MetricSummary,
    pub rel_mae: MetricSummary,
    pub pearson: MetricSummary,
}

impl RegressionSummary {
    fn from_folds(folds: &[RegressionMetrics]) -> Self {
        RegressionSummary {
            rel_rmse: MetricSummary::from_folds(folds.iter().map(|m| Some(m.rel_rmse)).collect()),
            rel_mae: MetricSummary::from_folds(folds.iter().map(|m| Some(m.rel_mae)).collect()),
            pearson: MetricSummary::from_folds(folds.iter().map(|m| m.pearson).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub subject: String,
    pub cycles: usize,
    pub truth: Prediction,
    pub prediction: Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub test_cycles: usize,
    pub cycle_classification: Option<ClassificationMetrics>,
    pub patient_classification: Option<ClassificationMetrics>,
    pub cycle_regression: Option<RegressionMetrics>,
    pub patient_regression: Option<RegressionMetrics>,
    /// One entry per test subject.
    pub patients: Vec<PatientResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub modality: Modality,
    pub k: usize,
    pub seed: u64,
    pub ensemble_size: usize,
    pub config_fingerprint: String,
    pub folds: Vec<FoldResult>,
    pub cycle_classification: Option<ClassificationSummary>,
    pub patient_classification: Option<ClassificationSummary>,
    pub cycle_regression: Option<RegressionSummary>,
    pub patient_regression: Option<RegressionSummary>,
}

fn all<T: Copy>(folds: &[FoldResult], f: fn(&FoldResult) -> Option<T>) -> Option<Vec<T>> {
    folds.iter().map(f).collect()
}

impl EvalReport {
    pub(crate) fn assemble(
        task: Task,
        modality: Modality,
        k: usize,
        seed: u64,
        ensemble_size: usize,
        config_fingerprint: String,
        folds: Vec<FoldResult>,
    ) -> Self {
        let cc =
            all(&folds, |f| f.cycle_classification).map(|v| ClassificationSummary::from_folds(&v));
        let pc = all(&folds, |f| f.patient_classification)
            .map(|v| ClassificationSummary::from_folds(&v));
        let cr = all(&folds, |f| f.cycle_regression).map(|v| RegressionSummary::from_folds(&v));
        let pr = all(&folds, |f| f.patient_regression).map(|v| RegressionSummary::from_folds(&v));
        EvalReport {
            task,
            modality,
            k,
            seed,
            ensemble_size,
            config_fingerprint,
            folds,
            cycle_classification: cc,
            patient_classification: pc,
            cycle_regression: cr,
            patient_regression: pr,
        }
    }

    /// Human-readable table, byte-identical for identical reports.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task         {}", self.task);
        let _ = writeln!(s, "modality     {}", self.modality);
        let _ = writeln!(s, "folds        {}", self.k);
        let _ = writeln!(s, "ensemble     {}", self.ensemble_size);
        let _ = writeln!(s, "seed         {}", self.seed);
        let _ = writeln!(s, "fingerprint  {}", self.config_fingerprint);
        let _ = writeln!(s);
        let rows = |s: &mut String, scope: &str, c: &Option<ClassificationSummary>| {
            if let Some(c) = c {
                let _ = writeln!(
                    s,
                    "{scope:<8} recall {}  precision {}  f1 {}  accuracy {}",
                    c.recall.cell(),
                    c.precision.cell(),
                    c.f1.cell(),
                    c.accuracy.cell()
                );
            }
        };
        rows(&mut s, "cycle", &self.cycle_classification);
        rows(&mut s, "patient", &self.patient_classification);
        let rows = |s: &mut String, scope: &str, r: &Option<RegressionSummary>| {
            if let Some(r) = r {
                let _ = writeln!(
                    s,
                    "{scope:<8} rel_rmse {}  rel_mae {}  pearson {}",
                    r.rel_rmse.cell(),
                    r.rel_mae.cell(),
                    r.pearson.cell()
                );
            }
        };
        rows(&mut s, "cycle", &self.cycle_regression);
        rows(&mut s, "patient", &self.patient_regression);
        for f in &self.folds {
            let _ = writeln!(
                s,
                "\nfold {}: {} train subjects, {} test subjects, {} test cycles",
                f.fold,
                f.train_subjects.len(),
                f.test_subjects.len(),
                f.test_cycles
            );
            if let (Some(c), Some(p)) = (f.cycle_classification, f.patient_classification) {
                let _ = writeln!(
                    s,
                    "  accuracy cycle {:.4} patient {:.4}",
                    c.accuracy, p.accuracy
                );
            }
            if let (Some(c), Some(p)) = (f.cycle_regression, f.patient_regression) {
                let _ = writeln!(
                    s,
                    "  rel_rmse cycle {:.4} patient {:.4}",
                    c.rel_rmse, p.rel_rmse
                );
            }
            for p in &f.patients {
                let show = |x: &Prediction| match x {
                    Prediction::Label(l) => l.to_string(),
                    Prediction::Value(v) => format!("{v:.2}"),
                };
                let _ = writeln!(
                    s,
                    "  {:<10} cycles {:>3}  truth {:>9}  predicted {:>9}",
                    p.subject,
                    p.cycles,
                    show(&p.truth),
                    show(&p.prediction)
                );
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Write `report.txt` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PulmoError::io(dir, e))?;
        for (name, text) in [
            ("report.txt", self.to_text()),
            ("summary.json", self.to_json()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| PulmoError::io(&p, e))?;
        }
        Ok(())
    }
}
