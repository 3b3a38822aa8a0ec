//! Decision thresholds, accuracy and AUCROC on score sets, and multi-run
//! aggregation.
//!
//! The decision rule is fixed: a record is flagged abnormal iff its score is
//! at least the threshold. Thresholds are calibrated on the very set they
//! are evaluated on, so the accuracies measure how well the score separates
//! the two classes rather than held-out performance.

mod plot;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{read_scores, ScoreRecord};

pub use plot::{plot_histogram, HistogramSpec};
pub use report::{aggregate_runs, render_table, Cell, MetricsReport, StdKind, CAVEAT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Sse,
    Fid,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::Sse, Metric::Fid];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Sse => "sse",
            Metric::Fid => "fid",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sse" => Ok(Metric::Sse),
            "fid" => Ok(Metric::Fid),
            _ => Err(Error::Config(format!("unknown metric `{s}` (expected sse or fid)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Zfn,
    Acc,
}

impl FromStr for Policy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zfn" => Ok(Policy::Zfn),
            "acc" => Ok(Policy::Acc),
            _ => Err(Error::Config(format!("unknown policy `{s}` (expected zfn or acc)"))),
        }
    }
}

/// `(score, is_abnormal)` pairs for one metric.
pub fn labeled_scores(records: &[ScoreRecord], metric: Metric) -> Result<Vec<(f64, bool)>> {
    records
        .iter()
        .map(|r| {
            let s = match metric {
                Metric::Sse => Some(r.sse),
                Metric::Fid => r.fid,
            };
            s.map(|s| (s, r.label.is_abnormal()))
                .ok_or_else(|| Error::Calibration(format!("record `{}` has no {metric} score", r.source_id)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(scores: &[(f64, bool)], tau: f64) -> Self {
        let mut c = Confusion::default();
        for &(s, abnormal) in scores {
            match (s >= tau, abnormal) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn recall(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }
}

fn class_counts(scores: &[(f64, bool)]) -> (usize, usize) {
    let na = scores.iter().filter(|s| s.1).count();
    (na, scores.len() - na)
}

fn require_both(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    let (na, nn) = class_counts(scores);
    if na == 0 || nn == 0 {
        return Err(Error::Calibration(format!(
            "need both classes, got {na} abnormal and {nn} normal scores"
        )));
    }
    Ok((na, nn))
}

/// Zero-false-negative threshold: the smallest abnormal score.
pub fn zfn_threshold(scores: &[(f64, bool)]) -> Result<f64> {
    scores
        .iter()
        .filter(|s| s.1)
        .map(|s| s.0)
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::Calibration("no abnormal scores to calibrate a zero-false-negative threshold".into()))
}

/// Accuracy-maximizing threshold among `{−∞} ∪ scores`; among equally
/// accurate thresholds the largest wins. Returns `(τ, accuracy)`.
pub fn acc_threshold(scores: &[(f64, bool)]) -> Result<(f64, f64)> {
    let (na, _) = require_both(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    // τ = −∞ flags everything: correct = all abnormal.
    let mut best = (f64::NEG_INFINITY, na);
    let mut below_normal = 0usize;
    let mut below_abnormal = 0usize;
    let mut i = 0;
    while i < n {
        let tau = sorted[i].0;
        // τ = this value: records strictly below are passed as normal.
        let correct = below_normal + (na - below_abnormal);
        if correct >= best.1 {
            best = (tau, correct);
        }
        while i < n && sorted[i].0 == tau {
            if sorted[i].1 {
                below_abnormal += 1;
            } else {
                below_normal += 1;
            }
            i += 1;
        }
    }
    Ok((best.0, best.1 as f64 / n as f64))
}

/// Mann–Whitney AUC with ties counted one half, through mid-ranks.
pub fn auc_roc(scores: &[(f64, bool)]) -> Result<f64> {
    let (na, nn) = require_both(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j, mid-rank (i + 1 + j) / 2
        let mid2 = (i + 1 + j) as u128;
        let abn = sorted[i..j].iter().filter(|s| s.1).count() as u128;
        rank2_sum += mid2 * abn;
        i = j;
    }
    let (na128, nn128) = (na as u128, nn as u128);
    let u2 = rank2_sum - na128 * (na128 + 1);
    Ok(u2 as f64 / (2 * na128 * nn128) as f64)
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct
/// threshold in decreasing order.
pub fn roc_curve(scores: &[(f64, bool)]) -> Result<Vec<(f64, f64)>> {
    let (na, nn) = require_both(scores)?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == tau {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        pts.push((fp as f64 / nn as f64, tp as f64 / na as f64));
    }
    Ok(pts)
}

pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5).sum()
}

/// Metrics of one score type on one run; accuracies and AUC in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub zfn_threshold: f64,
    pub zfn_acc: f64,
    pub acc_threshold: f64,
    pub max_acc: f64,
    pub auc: f64,
}

pub fn evaluate_scores(scores: &[(f64, bool)]) -> Result<DetectorMetrics> {
    require_both(scores)?;
    let zfn = zfn_threshold(scores)?;
    let (acc_tau, max_acc) = acc_threshold(scores)?;
    Ok(DetectorMetrics {
        zfn_threshold: zfn,
        zfn_acc: Confusion::at(scores, zfn).accuracy(),
        acc_threshold: acc_tau,
        max_acc,
        auc: auc_roc(scores)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub dataset: String,
    pub seed: Option<u64>,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub metrics: BTreeMap<Metric, DetectorMetrics>,
}

/// SSE metrics always, FID metrics when every record has an FID score.
pub fn evaluate_records(records: &[ScoreRecord], dataset: &str, seed: Option<u64>) -> Result<RunMetrics> {
    let mut metrics = BTreeMap::new();
    let sse = labeled_scores(records, Metric::Sse)?;
    let (na, nn) = require_both(&sse)?;
    metrics.insert(Metric::Sse, evaluate_scores(&sse)?);
    if !records.is_empty() && records.iter().all(|r| r.fid.is_some()) {
        metrics.insert(Metric::Fid, evaluate_scores(&labeled_scores(records, Metric::Fid)?)?);
    }
    Ok(RunMetrics { dataset: dataset.to_owned(), seed, n_normal: nn, n_abnormal: na, metrics })
}

pub fn evaluate_run(scores_path: &Path, dataset: &str, seed: Option<u64>) -> Result<RunMetrics> {
    let (_, records) = read_scores(scores_path)?;
    evaluate_records(&records, dataset, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(normal: &[f64], abnormal: &[f64]) -> Vec<(f64, bool)> {
        normal.iter().map(|&s| (s, false)).chain(abnormal.iter().map(|&s| (s, true))).collect()
    }

    #[test]
    fn zfn_examples() {
        let s = set(&[1.0, 2.0, 3.0], &[4.0, 5.0]);
        let t = zfn_threshold(&s).unwrap();
        assert_eq!(t, 4.0);
        assert_eq!(Confusion::at(&s, t).accuracy(), 1.0);

        let s = set(&[1.0, 2.0, 3.0, 10.0], &[4.0, 5.0]);
        let c = Confusion::at(&s, zfn_threshold(&s).unwrap());
        assert_eq!((c.fn_, c.fp), (0, 1));
        assert!((c.accuracy() - 5.0 / 6.0).abs() < 1e-15);

        let s = set(&[1.0, 2.0, 3.0], &[0.5, 5.0]);
        let c = Confusion::at(&s, zfn_threshold(&s).unwrap());
        assert_eq!(c.accuracy(), 2.0 / 5.0);
        assert!(zfn_threshold(&set(&[1.0], &[])).is_err());
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc_threshold(&set(&[1.0, 2.0], &[3.0, 4.0])).unwrap(), (3.0, 1.0));
        let (tau, acc) = acc_threshold(&set(&[1.0, 3.0], &[2.0, 4.0])).unwrap();
        assert_eq!(acc, 0.75);
        // τ = 2 and τ = 4 both reach 75%; the larger one wins.
        assert_eq!(tau, 4.0);
        let (_, acc) = acc_threshold(&set(&[1.0, 1.0], &[1.0, 1.0])).unwrap();
        assert_eq!(acc, 0.5);
        assert!(matches!(acc_threshold(&set(&[1.0], &[])), Err(Error::Calibration(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&set(&[1.0, 2.0], &[3.0, 4.0])).unwrap(), 1.0);
        assert_eq!(auc_roc(&set(&[2.0, 2.0], &[2.0, 2.0])).unwrap(), 0.5);
        assert_eq!(auc_roc(&set(&[1.0, 3.0], &[2.0, 4.0])).unwrap(), 0.75);
        let s = set(&[1.0, 3.0, 3.0, 0.5], &[2.0, 4.0, 3.0]);
        let area = trapezoid_area(&roc_curve(&s).unwrap());
        assert!((area - auc_roc(&s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn separable_run_saturates() {
        use crate::dataset::Label;
        let rec = |i: usize, label: Label, sse: f64| ScoreRecord { source_id: format!("{i}"), label, sse, fid: None };
        let records: Vec<ScoreRecord> = (0..4)
            .map(|i| rec(i, Label::Normal, i as f64))
            .chain((0..4).map(|i| rec(10 + i, Label::Abnormal, 10.0 + i as f64)))
            .collect();
        let m = evaluate_records(&records, "fixture", Some(3)).unwrap();
        assert_eq!(m.metrics.len(), 1);
        let d = m.metrics[&Metric::Sse];
        assert_eq!((d.zfn_acc, d.max_acc, d.auc), (1.0, 1.0, 1.0));
    }
}
