//! Unlearning accuracy (UA), remaining accuracy (RA), test accuracy (TA),
//! membership-inference score (MIA), and the trainable-parameter share.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit};
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::nn::{per_sample_cross_entropy, Model};
use crate::rng::{stream, Stream};

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy_of(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    let logits = model.forward(&data.features)?;
    accuracy_of(&argmax_rows(&logits), &data.labels)
}

pub fn compute_ua(model: &Model, forget: &Dataset) -> Result<f64> {
    Ok(100.0 - accuracy(model, forget)?)
}

/// Loss-threshold membership attacker: a one-feature logistic regression on
/// the log of the per-sample true-class cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiaAttacker {
    pub weight: f64,
    pub bias: f64,
}

fn loss_feature(losses: &[f64]) -> Vec<f64> {
    losses.iter().map(|l| (l + 1e-12).ln()).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MiaAttacker {
    /// Fits on member losses (label 1) and non-member losses (label 0) by Newton iterations.
    pub fn fit(member_losses: &[f64], nonmember_losses: &[f64]) -> Result<MiaAttacker> {
        if member_losses.is_empty() || nonmember_losses.is_empty() {
            return Err(invalid("attacker needs both members and non-members"));
        }
        let xs: Vec<(f64, f64)> = loss_feature(member_losses)
            .into_iter()
            .map(|x| (x, 1.0))
            .chain(loss_feature(nonmember_losses).into_iter().map(|x| (x, 0.0)))
            .collect();
        // Standardize for conditioning, then map the solution back.
        let n = xs.len() as f64;
        let mean = xs.iter().map(|p| p.0).sum::<f64>() / n;
        let sd = (xs.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        let ridge = 1e-4;
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut gw, mut gb, mut hww, mut hwb, mut hbb) = (ridge * w, 0.0, ridge, 0.0, 0.0);
            for &(x, y) in &xs {
                let z = (x - mean) / sd;
                let p = sigmoid(w * z + b);
                let r = p - y;
                gw += r * z;
                gb += r;
                let s = (p * (1.0 - p)).max(1e-12);
                hww += s * z * z;
                hwb += s * z;
                hbb += s;
            }
            let det = hww * hbb - hwb * hwb;
            if det.abs() < 1e-300 {
                break;
            }
            let dw = (hbb * gw - hwb * gb) / det;
            let db = (hww * gb - hwb * gw) / det;
            w -= dw;
            b -= db;
            if dw.abs().max(db.abs()) < 1e-10 {
                break;
            }
        }
        Ok(MiaAttacker {
            weight: w / sd,
            bias: b - w * mean / sd,
        })
    }

    pub fn is_member(&self, loss: f64) -> bool {
        sigmoid(self.weight * (loss + 1e-12).ln() + self.bias) >= 0.5
    }

    /// Mean of member and non-member recall.
    pub fn balanced_accuracy(&self, members: &[f64], nonmembers: &[f64]) -> f64 {
        let tpr = members.iter().filter(|&&l| self.is_member(l)).count() as f64 / members.len() as f64;
        let tnr =
            nonmembers.iter().filter(|&&l| !self.is_member(l)).count() as f64 / nonmembers.len() as f64;
        50.0 * (tpr + tnr)
    }
}

fn losses(model: &Model, data: &Dataset) -> Result<Vec<f64>> {
    per_sample_cross_entropy(&model.forward(&data.features)?, &data.labels)
}

/// Trains the attacker on balanced, seeded samples of `remain` (members)
/// and `test` (non-members).
pub fn fit_attacker(model: &Model, remain: &Dataset, test: &Dataset, seed: u64) -> Result<MiaAttacker> {
    if remain.is_empty() || test.is_empty() {
        return Err(invalid("MIA needs nonempty remain and test sets"));
    }
    let k = remain.len().min(test.len());
    let mut rng = stream(seed, Stream::Mia);
    let mut members = sample(&mut rng, remain.len(), k).into_vec();
    let mut nonmembers = sample(&mut rng, test.len(), k).into_vec();
    members.sort_unstable();
    nonmembers.sort_unstable();
    let lm = losses(model, &remain.subset(&members))?;
    let ln = losses(model, &test.subset(&nonmembers))?;
    MiaAttacker::fit(&lm, &ln)
}

/// Percentage of `forget` the attacker labels non-member.
pub fn mia_score(attacker: &MiaAttacker, forget_losses: &[f64]) -> Result<f64> {
    if forget_losses.is_empty() {
        return Err(invalid("MIA of an empty forget set"));
    }
    let non = forget_losses.iter().filter(|&&l| !attacker.is_member(l)).count();
    Ok(100.0 * non as f64 / forget_losses.len() as f64)
}

pub fn compute_mia(
    model: &Model,
    remain: &Dataset,
    forget: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<f64> {
    if forget.is_empty() {
        return Err(invalid("MIA of an empty forget set"));
    }
    let attacker = fit_attacker(model, remain, test, seed)?;
    mia_score(&attacker, &losses(model, forget)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
    /// `None` where membership inference is not defined (generation runs).
    pub mia: Option<f64>,
    pub tparams_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: Option<f64>,
    pub tparams_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model_seed: u64,
    pub data_seed: u64,
    pub unlearn_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub method: String,
    pub mode: String,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub metrics: Metrics,
    pub deltas_vs_retrain: Option<Deltas>,
    pub wallclock_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Seeds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spectrum_summary: Vec<LayerRank>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<GenerationSummary>,
}

/// Per-class oracle agreement of generated samples before and after
/// unlearning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub forget_class: usize,
    pub agreement_before: Vec<f64>,
    pub agreement_after: Vec<f64>,
    pub in_distribution_after: Vec<f64>,
}

impl GenerationSummary {
    /// Largest agreement loss over the classes that were not forgotten.
    pub fn max_retained_drop(&self) -> f64 {
        (0..self.agreement_before.len())
            .filter(|&c| c != self.forget_class)
            .map(|c| self.agreement_before[c] - self.agreement_after[c])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Run metadata carried into a report.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMeta {
    pub method: String,
    pub mode: String,
    pub gamma: Option<f64>,
    pub seeds: Seeds,
    pub epochs: Option<usize>,
    pub mia_seed: u64,
}

pub fn tparams_pct(trainable: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * trainable as f64 / total as f64
    }
}

fn check_pct(name: &str, v: f64) {
    assert!((0.0..=100.0).contains(&v), "{name} = {v} outside [0, 100]");
}

impl Metrics {
    pub fn deltas_from(&self, anchor: &Metrics) -> Deltas {
        Deltas {
            ua: self.ua - anchor.ua,
            ra: self.ra - anchor.ra,
            ta: self.ta - anchor.ta,
            mia: self.mia.zip(anchor.mia).map(|(a, b)| a - b),
            tparams_pct: self.tparams_pct - anchor.tparams_pct,
        }
    }

    pub fn check_ranges(&self) {
        check_pct("ua", self.ua);
        check_pct("ra", self.ra);
        check_pct("ta", self.ta);
        if let Some(m) = self.mia {
            check_pct("mia", m);
        }
        check_pct("tparams_pct", self.tparams_pct);
    }
}

/// UA on the forget set, RA on the remain set, TA on the test set, MIA,
/// and the trainable share.
pub fn build_report(
    model: &Model,
    split: &DatasetSplit,
    trainable: usize,
    total: usize,
    retrain: Option<&UnlearnReport>,
    meta: &RunMeta,
) -> Result<UnlearnReport> {
    let forget = split.forget_set();
    let remain = split.remain_set();
    let metrics = Metrics {
        ua: compute_ua(model, &forget)?,
        ra: accuracy(model, &remain)?,
        ta: accuracy(model, &split.test)?,
        mia: Some(compute_mia(model, &remain, &forget, &split.test, meta.mia_seed)?),
        tparams_pct: tparams_pct(trainable, total),
    };
    metrics.check_ranges();
    Ok(UnlearnReport {
        method: meta.method.clone(),
        mode: meta.mode.clone(),
        gamma: meta.gamma,
        seed: meta.seeds.unlearn_seed,
        deltas_vs_retrain: retrain.map(|r| metrics.deltas_from(&r.metrics)),
        metrics,
        wallclock_s: None,
        seeds: Some(meta.seeds.clone()),
        epochs: meta.epochs,
        spectrum_summary: Vec::new(),
        generation: None,
    })
}

/// `"26.47 (0.00)"` style cell.
pub fn format_cell(value: f64, delta: Option<f64>) -> String {
    match delta {
        Some(d) => format!("{value:.2} ({:.2})", if d == 0.0 { 0.0 } else { d }),
        None => format!("{value:.2}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_arithmetic() {
        assert_eq!(accuracy_of(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy_of(&[1, 1, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.0);
        assert_eq!(accuracy_of(&[0, 1, 2, 0], &[0, 1, 2, 3]).unwrap(), 75.0);
        assert!(accuracy_of(&[], &[]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&m), vec![0, 1]);
    }

    #[test]
    fn ua_definition_anchor() {
        // accuracy 73.53 on the forget set renders as UA 26.47
        let ua = 100.0 - 73.53;
        assert_eq!(format!("{ua:.2}"), "26.47");
    }

    #[test]
    fn mia_score_arithmetic() {
        // members have low loss, non-members high loss
        let att = MiaAttacker::fit(&[0.01, 0.02, 0.015, 0.03], &[2.0, 3.0, 1.5, 2.5]).unwrap();
        assert!(att.weight < 0.0);
        assert_eq!(mia_score(&att, &[5.0, 4.0, 3.0, 6.0]).unwrap(), 100.0);
        assert_eq!(mia_score(&att, &[0.01, 0.02, 0.01, 0.02]).unwrap(), 0.0);
        assert_eq!(mia_score(&att, &[5.0, 4.0, 3.0, 0.01]).unwrap(), 75.0);
        assert!(mia_score(&att, &[]).is_err());
        assert_eq!(att.balanced_accuracy(&[0.01, 0.02], &[2.0, 3.0]), 100.0);
    }

    #[test]
    fn tparams_rendering() {
        assert_eq!(format!("{:.2}", tparams_pct(29, 5400)), "0.54");
        assert_eq!(format_cell(26.47, Some(0.0)), "26.47 (0.00)");
        assert_eq!(format_cell(26.47, Some(-0.0)), "26.47 (0.00)");
        assert_eq!(format_cell(1.18, None), "1.18");
        assert_eq!(format_cell(30.0, Some(3.53)), "30.00 (3.53)");
    }

    #[test]
    fn identical_reports_have_zero_deltas() {
        let m = Metrics {
            ua: 26.47,
            ra: 100.0,
            ta: 73.0,
            mia: Some(40.0),
            tparams_pct: 100.0,
        };
        let d = m.deltas_from(&m);
        assert_eq!((d.ua, d.ra, d.ta, d.mia, d.tparams_pct), (0.0, 0.0, 0.0, Some(0.0), 0.0));
    }
}
