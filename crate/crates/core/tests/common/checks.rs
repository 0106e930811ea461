//! Deterministic property checks shared by the module tests and the
//! acceptance runner. Each returns `Ok(summary)` or `Err(first failure)`.

use pulmo_core::encoding::{rate_encode, EncoderConfig};
use pulmo_core::eval::{classification_metrics, majority_vote, regression_metrics};
use pulmo_core::snn::{lif_step, LifParams, LifState};
use pulmo_core::spirometry::{
    classify, predicted_fev1_fvc, predicted_pef, Label, ReferenceCoefficients,
};
use pulmo_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::lif_scalar;

pub type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_params(r: &mut ChaCha8Rng) -> LifParams {
    LifParams {
        beta: r.random_range(0.01f32..0.99),
        v_th: r.random_range(0.1f32..2.0),
        surrogate_slope: 25.0,
    }
}

/// Vectorised `lif_step` against the scalar reference, bit for bit.
pub fn lif_oracle(tuples: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut neurons = 0;
    for case in 0..tuples {
        let n = r.random_range(1..=32);
        let p = random_params(&mut r);
        let v: Vec<f32> = (0..n).map(|_| r.random_range(-2.0f32..2.0)).collect();
        // bias some currents onto the threshold so `m == V_th` is exercised
        let i: Vec<f32> = v
            .iter()
            .map(|&vi| {
                if r.random_bool(0.1) {
                    p.v_th - p.beta * vi
                } else {
                    r.random_range(-2.0f32..3.0)
                }
            })
            .collect();
        let state = LifState {
            v: Tensor::vector(v.clone()),
        };
        let (spikes, next) =
            lif_step(&state, &Tensor::vector(i.clone()), &p).map_err(|e| e.to_string())?;
        for k in 0..n {
            let (s, vn) = lif_scalar(v[k], i[k], p.beta, p.v_th);
            if s.to_bits() != spikes.data()[k].to_bits()
                || vn.to_bits() != next.v.data()[k].to_bits()
            {
                return Err(format!(
                    "tuple {case} neuron {k}: library ({}, {}) vs scalar ({s}, {vn})",
                    spikes.data()[k],
                    next.v.data()[k]
                ));
            }
        }
        neurons += n;
    }
    Ok(format!("{tuples} tuples, {neurons} neurons bit-identical"))
}

/// Unrolling `m = beta v + I`, `v' = m - s V_th` gives, for every step t,
/// `v_t + V_th * sum_k beta^(t-k) s_k == sum_k beta^(t-k) I_k`.
/// Also checks every step against the scalar reference and the bound
/// `|v| <= I_max / (1 - beta)`.
pub fn reset_accounting(steps: usize, neurons: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let p = LifParams::default();
    let i_max = 1.5f32;
    let bound = f64::from(i_max) / (1.0 - f64::from(p.beta));
    let mut state = LifState::zeros(&[neurons]);
    let mut scalar = vec![0.0f32; neurons];
    let mut drive = vec![0.0f64; neurons];
    let mut fired = vec![0.0f64; neurons];
    let mut worst = 0.0f64;
    let mut spikes_total = 0.0;
    for t in 0..steps {
        let i: Vec<f32> = (0..neurons)
            .map(|_| r.random_range(-i_max..=i_max))
            .collect();
        let (s, next) =
            lif_step(&state, &Tensor::vector(i.clone()), &p).map_err(|e| e.to_string())?;
        for k in 0..neurons {
            let (ss, vs) = lif_scalar(scalar[k], i[k], p.beta, p.v_th);
            scalar[k] = vs;
            let v = next.v.data()[k];
            if ss != s.data()[k] || vs.to_bits() != v.to_bits() {
                return Err(format!(
                    "step {t} neuron {k}: differs from the scalar reference"
                ));
            }
            let b = f64::from(p.beta);
            drive[k] = b * drive[k] + f64::from(i[k]);
            fired[k] = b * fired[k] + f64::from(s.data()[k]);
            spikes_total += f64::from(s.data()[k]);
            let gap = (f64::from(v) + f64::from(p.v_th) * fired[k] - drive[k]).abs();
            worst = worst.max(gap);
            if gap > 1e-4 {
                return Err(format!("step {t} neuron {k}: identity off by {gap:e}"));
            }
            if f64::from(v).abs() > bound {
                return Err(format!("step {t} neuron {k}: |v| = {v} exceeds {bound}"));
            }
        }
        state = next;
    }
    Ok(format!(
        "{steps} steps x {neurons} neurons, {spikes_total} spikes, max gap {worst:.1e}"
    ))
}

/// Bernoulli rates for p in {0.1, 0.5, 0.9}: 3-sigma band, chi-square at
/// alpha = 0.01, lag-1 autocorrelation within 0.05, and seed determinism.
pub fn rate_statistics(draws: usize, seed: u64) -> Check {
    let critical = ChiSquared::new(1.0).unwrap().inverse_cdf(0.99);
    let mut summary = Vec::new();
    for (j, p) in [0.1f32, 0.5, 0.9].into_iter().enumerate() {
        let input = Tensor::full(&[draws, 1], p);
        let cfg = EncoderConfig::with_seed(seed + j as u64);
        let train = rate_encode(&input, &cfg).map_err(|e| e.to_string())?;
        let again = rate_encode(&input, &cfg).map_err(|e| e.to_string())?;
        if train != again {
            return Err(format!("p={p}: same seed gave different spike trains"));
        }
        let s: Vec<f64> = train
            .tensor()
            .data()
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let n = s.len() as f64;
        let pf = f64::from(p);
        let k: f64 = s.iter().sum();
        let sigma = (n * pf * (1.0 - pf)).sqrt();
        if (k - n * pf).abs() > 3.0 * sigma {
            return Err(format!(
                "p={p}: {k} spikes, outside {} +- 3*{sigma:.1}",
                n * pf
            ));
        }
        let chi2 = (k - n * pf).powi(2) / (n * pf) + (k - n * pf).powi(2) / (n * (1.0 - pf));
        if chi2 > critical {
            return Err(format!("p={p}: chi-square {chi2:.2} > {critical:.2}"));
        }
        let lag = lag1_autocorrelation(&s[..10_000.min(s.len())]);
        if lag.abs() > 0.05 {
            return Err(format!("p={p}: lag-1 autocorrelation {lag:.4}"));
        }
        summary.push(format!(
            "p={p}: rate {:.4}, chi2 {chi2:.2}, lag1 {lag:+.4}",
            k / n
        ));
    }
    Ok(summary.join("; "))
}

pub fn lag1_autocorrelation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let cov: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    cov / var
}

/// Brute-force confusion-matrix oracle.
pub fn confusion_oracle(preds: &[Label], truth: &[Label]) -> (f64, f64, f64, f64) {
    let count = |p: Label, t: Label| {
        preds
            .iter()
            .zip(truth)
            .filter(|&(&a, &b)| a == p && b == t)
            .count() as f64
    };
    let tp = count(Label::Abnormal, Label::Abnormal);
    let fp = count(Label::Abnormal, Label::Normal);
    let fneg = count(Label::Normal, Label::Abnormal);
    let tn = count(Label::Normal, Label::Normal);
    let recall = if tp + fneg > 0.0 {
        tp / (tp + fneg)
    } else {
        0.0
    };
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (recall, precision, f1, (tp + tn) / preds.len() as f64)
}

/// Direct-formula regression oracle: `(rel_rmse, rel_mae, pearson)`.
pub fn regression_oracle(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let n = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n;
    let mp = p.iter().sum::<f64>() / n;
    let rmse = (p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
    let mae = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let cov: f64 = p.iter().zip(t).map(|(a, b)| (a - mp) * (b - mt)).sum();
    let sp = p.iter().map(|a| (a - mp).powi(2)).sum::<f64>().sqrt();
    let st = t.iter().map(|b| (b - mt).powi(2)).sum::<f64>().sqrt();
    (rmse / mt, mae / mt, cov / (sp * st))
}

fn random_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<Label> {
    let bias = r.random_range(0.0..1.0);
    (0..n)
        .map(|_| {
            if r.random_bool(bias) {
                Label::Abnormal
            } else {
                Label::Normal
            }
        })
        .collect()
}

pub fn metric_oracles(cases: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for case in 0..cases {
        let n = r.random_range(1..=40);
        let preds = random_labels(&mut r, n);
        let truth = random_labels(&mut r, n);
        let m = classification_metrics(&preds, &truth).map_err(|e| e.to_string())?;
        let want = confusion_oracle(&preds, &truth);
        if (m.recall, m.precision, m.f1, m.accuracy) != want {
            return Err(format!(
                "classification case {case}: {m:?} vs oracle {want:?}"
            ));
        }

        let t: Vec<f64> = (0..n + 2).map(|_| r.random_range(100.0..700.0)).collect();
        let p: Vec<f64> = t.iter().map(|v| v + r.random_range(-80.0..80.0)).collect();
        let m = regression_metrics(&p, &t).map_err(|e| e.to_string())?;
        let (rmse, mae, rho) = regression_oracle(&p, &t);
        let pearson = m.pearson.ok_or("pearson undefined on random data")?;
        if (m.rel_rmse - rmse).abs() > 1e-9
            || (m.rel_mae - mae).abs() > 1e-9
            || (pearson - rho).abs() > 1e-9
        {
            return Err(format!(
                "regression case {case}: {m:?} vs ({rmse}, {mae}, {rho})"
            ));
        }

        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut r);
        let vote = majority_vote(&preds).map_err(|e| e.to_string())?;
        if majority_vote(&shuffled).map_err(|e| e.to_string())? != vote {
            return Err(format!("vote case {case}: permutation changed the vote"));
        }
    }
    let tie = [
        Label::Normal,
        Label::Abnormal,
        Label::Abnormal,
        Label::Normal,
    ];
    if majority_vote(&tie).map_err(|e| e.to_string())? != Label::Abnormal {
        return Err("a tied vote did not go to Abnormal".into());
    }
    Ok(format!(
        "{cases} cases exact / <= 1e-9; votes permutation-invariant; tie -> abnormal"
    ))
}

pub fn spirometry_rule(seed: u64) -> Check {
    let lbl = |a, b, c, d| classify(a, b, c, d).map_err(|e| e.to_string());
    // 2.8 / 5.0 = 0.56 and 0.56 / 0.8 = 0.7
    let edge = lbl(2.8, 5.0, 4.0, 5.0)?;
    if edge.label != Label::Normal || edge.ratio_percent != 70.0 {
        return Err(format!("ratio exactly 70 gave {edge:?}"));
    }
    let below = lbl(2.7999, 5.0, 4.0, 5.0)?;
    if below.label != Label::Abnormal {
        return Err(format!("ratio just under 70 gave {below:?}"));
    }
    let mut r = rng(seed);
    for _ in 0..1000 {
        let (fev1, fvc) = (r.random_range(0.5..5.0), r.random_range(1.0..6.0));
        let (pf, pv) = (r.random_range(2.0..4.5), r.random_range(3.0..6.0));
        let c = r.random_range(0.01..100.0);
        let a = lbl(fev1, fvc, pf, pv)?;
        let b = lbl(fev1 * c, fvc * c, pf, pv)?;
        if a.label != b.label {
            return Err(format!("scaling by {c} flipped {a:?} to {b:?}"));
        }
    }

    let coeffs = ReferenceCoefficients::synthetic();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("coefficients.json");
    coeffs.save(&path).map_err(|e| e.to_string())?;
    let back = ReferenceCoefficients::load(&path).map_err(|e| e.to_string())?;
    if back != coeffs {
        return Err("coefficient file did not round-trip".into());
    }
    let mut checked = 0;
    for g in &coeffs.groups {
        for _ in 0..50 {
            let age = r.random_range(18.0..75.0);
            let height = r.random_range(140.0..205.0);
            let a = predicted_fev1_fvc(age, height, g.sex, &g.group_id, &coeffs)
                .map_err(|e| e.to_string())?;
            let b = predicted_fev1_fvc(age, height, g.sex, &g.group_id, &back)
                .map_err(|e| e.to_string())?;
            let pa = predicted_pef(age, height, g.sex, &g.group_id, &coeffs)
                .map_err(|e| e.to_string())?;
            let pb =
                predicted_pef(age, height, g.sex, &g.group_id, &back).map_err(|e| e.to_string())?;
            if a.0.to_bits() != b.0.to_bits()
                || a.1.to_bits() != b.1.to_bits()
                || pa.to_bits() != pb.to_bits()
            {
                return Err(format!(
                    "group {} {:?}: predictions differ after reload",
                    g.group_id, g.sex
                ));
            }
            checked += 1;
        }
    }
    Ok(format!(
        "70.0 -> normal; 1000 rescalings stable; {checked} predictions bit-exact after reload"
    ))
}
