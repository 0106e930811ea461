//! Predicted spirometry values from coefficient tables, and the
//! normal/abnormal labelling rule.
//!
//! Coefficients are runtime data. A table holds one entry per
//! `(sex, group_id)` with
//!
//! * FEV1 and FVC (litres): `b0 + b1*age + b2*age^2 + b3*height^2`
//! * PEF (L/min): `exp(c0 + c1*ln(age) + c2*age + c3/height)`
//!
//! with age in years and height in centimetres.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PulmoError, Result};

/// Measured-over-predicted FEV1/FVC percentage at or above which a subject
/// is labelled normal.
pub const NORMAL_THRESHOLD_PERCENT: f64 = 70.0;

pub const HEIGHT_RANGE_CM: (f64, f64) = (100.0, 220.0);
pub const AGE_RANGE_YEARS: (f64, f64) = (15.0, 75.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    /// Class index used by the classifiers: Normal = 0, Abnormal = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Abnormal => 1,
        }
    }

    pub fn from_class(index: usize) -> Result<Self> {
        match index {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Abnormal),
            other => Err(PulmoError::Domain(format!(
                "class index {other} not in {{0,1}}"
            ))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiroLabel {
    pub label: Label,
    pub ratio_percent: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCoefficients {
    pub sex: Sex,
    pub group_id: String,
    /// `[b0, b1, b2, b3]`
    pub fev1: [f64; 4],
    pub fvc: [f64; 4],
    /// `[c0, c1, c2, c3]`
    pub pef: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceCoefficients {
    pub groups: Vec<GroupCoefficients>,
}

impl ReferenceCoefficients {
    pub fn from_json(text: &str) -> Result<Self> {
        let table: ReferenceCoefficients = serde_json::from_str(text)
            .map_err(|e| PulmoError::Format(format!("coefficient file: {e}")))?;
        table.validate()?;
        Ok(table)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("coefficient table serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PulmoError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| PulmoError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(PulmoError::Config("coefficient table has no groups".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            let all = g.fev1.iter().chain(&g.fvc).chain(&g.pef);
            if all.into_iter().any(|c| !c.is_finite()) {
                return Err(PulmoError::Config(format!(
                    "group {} ({}) has non-finite coefficients",
                    g.group_id, g.sex
                )));
            }
            if self.groups[..i]
                .iter()
                .any(|o| o.sex == g.sex && o.group_id == g.group_id)
            {
                return Err(PulmoError::Config(format!(
                    "duplicate coefficient group ({}, {})",
                    g.sex, g.group_id
                )));
            }
        }
        Ok(())
    }

    pub fn group(&self, sex: Sex, group_id: &str) -> Result<&GroupCoefficients> {
        self.groups
            .iter()
            .find(|g| g.sex == sex && g.group_id == group_id)
            .ok_or_else(|| {
                PulmoError::Config(format!("no coefficients for group ({sex}, {group_id})"))
            })
    }

    /// Table used by the synthetic data generator. The values are
    /// illustrative only and carry no clinical meaning.
    pub fn synthetic() -> Self {
        ReferenceCoefficients {
            groups: vec![
                GroupCoefficients {
                    sex: Sex::Male,
                    group_id: "synthetic".into(),
                    fev1: [0.5536, -0.01303, -0.000172, 0.00014098],
                    fvc: [-0.1933, 0.00064, -0.000269, 0.00018642],
                    pef: [5.48, 0.544, -0.0151, -74.7],
                },
                GroupCoefficients {
                    sex: Sex::Female,
                    group_id: "synthetic".into(),
                    fev1: [0.4333, -0.00361, -0.000194, 0.00011496],
                    fvc: [-0.3560, 0.01870, -0.000382, 0.00014815],
                    pef: [5.63, 0.376, -0.0120, -58.8],
                },
            ],
        }
    }
}

fn check_demographics(age: f64, height: f64) -> Result<()> {
    if !(height.is_finite() && (HEIGHT_RANGE_CM.0..=HEIGHT_RANGE_CM.1).contains(&height)) {
        return Err(PulmoError::Domain(format!(
            "height {height} cm outside [{}, {}]",
            HEIGHT_RANGE_CM.0, HEIGHT_RANGE_CM.1
        )));
    }
    if !(age.is_finite() && age > 0.0) {
        return Err(PulmoError::Domain(format!("age {age} must be positive")));
    }
    if !(AGE_RANGE_YEARS.0..=AGE_RANGE_YEARS.1).contains(&age) {
        log::warn!(
            "age {age} outside the supported range [{}, {}]",
            AGE_RANGE_YEARS.0,
            AGE_RANGE_YEARS.1
        );
    }
    Ok(())
}

fn polynomial(b: &[f64; 4], age: f64, height: f64) -> f64 {
    b[0] + b[1] * age + b[2] * age * age + b[3] * height * height
}

/// Predicted `(FEV1, FVC)` in litres.
pub fn predicted_fev1_fvc(
    age: f64,
    height: f64,
    sex: Sex,
    group_id: &str,
    coeffs: &ReferenceCoefficients,
) -> Result<(f64, f64)> {
    let g = coeffs.group(sex, group_id)?;
    check_demographics(age, height)?;
    let fev1 = polynomial(&g.fev1, age, height);
    let fvc = polynomial(&g.fvc, age, height);
    for (name, v) in [("FEV1", fev1), ("FVC", fvc)] {
        if !(v > 0.0) {
            return Err(PulmoError::Domain(format!(
                "predicted {name} {v} is not positive (age {age}, height {height})"
            )));
        }
    }
    Ok((fev1, fvc))
}

/// Predicted peak expiratory flow in L/min.
pub fn predicted_pef(
    age: f64,
    height: f64,
    sex: Sex,
    group_id: &str,
    coeffs: &ReferenceCoefficients,
) -> Result<f64> {
    let g = coeffs.group(sex, group_id)?;
    check_demographics(age, height)?;
    let c = &g.pef;
    Ok((c[0] + c[1] * age.ln() + c[2] * age + c[3] / height).exp())
}

/// Ratio of the measured FEV1/FVC to the predicted FEV1/FVC, in percent,
/// labelled Normal at or above 70.
///
/// The percentage is rounded to 1e-9 so that values constructed to sit
/// exactly on the threshold are not pushed below it by division rounding.
pub fn classify(
    measured_fev1: f64,
    measured_fvc: f64,
    predicted_fev1: f64,
    predicted_fvc: f64,
) -> Result<SpiroLabel> {
    for (name, v) in [
        ("measured FEV1", measured_fev1),
        ("measured FVC", measured_fvc),
        ("predicted FEV1", predicted_fev1),
        ("predicted FVC", predicted_fvc),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(PulmoError::Domain(format!(
                "{name} must be positive, got {v}"
            )));
        }
    }
    let raw = 100.0 * (measured_fev1 / measured_fvc) / (predicted_fev1 / predicted_fvc);
    let ratio_percent = (raw * 1e9).round() / 1e9;
    let label = if ratio_percent >= NORMAL_THRESHOLD_PERCENT {
        Label::Normal
    } else {
        Label::Abnormal
    };
    Ok(SpiroLabel {
        label,
        ratio_percent,
    })
}
