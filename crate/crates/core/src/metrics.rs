//! Binary classification metrics over risk scores.
//!
//! AUROC counts ties as one half (Mann-Whitney). AUPRC is average precision
//! over descending distinct-score thresholds. The F1 sweep tries every
//! distinct score as a `>=` threshold, plus +inf.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::Prediction;
use crate::record::PatientRecord;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cohort needs at least one positive and one negative")]
    DegenerateCohort,
    #[error("cohort has no positives")]
    NoPositives,
    #[error("score {0} is not finite")]
    NonFinite(usize),
    #[error("label at {0} is not 0 or 1")]
    BadLabel(usize),
}

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(MetricError::BadLabel(i));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Groups of equal score in ascending score order, as (positives,
/// negatives) per group.
fn groups_ascending(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let (pos, neg) = (usize::from(labels[i] == 1), usize::from(labels[i] == 0));
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += pos;
                g.2 += neg;
            }
            _ => groups.push((scores[i], pos, neg)),
        }
    }
    groups
}

/// AUROC as an exact fraction `(numerator, denominator)` where the
/// numerator counts wins twice and ties once and the denominator is
/// `2 * positives * negatives`.
pub fn auroc_fraction(scores: &[f64], labels: &[u8]) -> Result<(u128, u128), MetricError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::DegenerateCohort);
    }
    let mut negatives_below: u128 = 0;
    let mut numerator: u128 = 0;
    for (_, p, n) in groups_ascending(scores, labels) {
        numerator += 2 * p as u128 * negatives_below + p as u128 * n as u128;
        negatives_below += n as u128;
    }
    Ok((numerator, 2 * pos as u128 * neg as u128))
}

pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (num, den) = auroc_fraction(scores, labels)?;
    Ok(num as f64 / den as f64)
}

/// Average precision: sum over thresholds of (R_i - R_{i-1}) * P_i.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::DegenerateCohort);
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, p, n) in groups_ascending(scores, labels).into_iter().rev() {
        tp += p;
        fp += n;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// `f64::INFINITY` stands for "predict nothing positive".
    pub threshold: f64,
}

/// Precision, recall and F1 when `tp + fn_ = positives`.
fn prf(tp: usize, fp: usize, positives: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = tp as f64 / positives as f64;
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + (positives - tp)) as f64
    };
    (precision, recall, f1)
}

/// F1 at a single `score >= threshold` cut.
pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64, MetricError> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let tp = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **s >= threshold && **l == 1)
        .count();
    let fp = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| **s >= threshold && **l == 0)
        .count();
    Ok(prf(tp, fp, pos).2)
}

/// Best F1 over all distinct-score thresholds and +inf; ties go to the
/// higher threshold.
pub fn best_f1_sweep(scores: &[f64], labels: &[u8]) -> Result<BestF1, MetricError> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    // walking down from +inf, a later threshold wins only if strictly better
    let mut best = BestF1 {
        f1: 0.0,
        precision: 0.0,
        recall: 0.0,
        threshold: f64::INFINITY,
    };
    let (mut tp, mut fp) = (0, 0);
    for (score, p, n) in groups_ascending(scores, labels).into_iter().rev() {
        tp += p;
        fp += n;
        let (precision, recall, f1) = prf(tp, fp, pos);
        if f1 > best.f1 {
            best = BestF1 {
                f1,
                precision,
                recall,
                threshold: score,
            };
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub auprc: f64,
    pub best_f1: f64,
    pub precision_at_best: f64,
    pub recall_at_best: f64,
    pub threshold_at_best: f64,
    pub n: usize,
    pub positives: usize,
}

impl MetricReport {
    pub fn compute(scores: &[f64], labels: &[u8]) -> Result<MetricReport, MetricError> {
        let best = best_f1_sweep(scores, labels)?;
        Ok(MetricReport {
            auroc: auroc(scores, labels)?,
            auprc: auprc(scores, labels)?,
            best_f1: best.f1,
            precision_at_best: best.precision,
            recall_at_best: best.recall,
            threshold_at_best: best.threshold,
            n: scores.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
        })
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = [
            ("auroc", format!("{:.4}", self.auroc)),
            ("auprc", format!("{:.4}", self.auprc)),
            ("best_f1", format!("{:.4}", self.best_f1)),
            (
                "precision_at_best",
                format!("{:.4}", self.precision_at_best),
            ),
            ("recall_at_best", format!("{:.4}", self.recall_at_best)),
            ("threshold_at_best", format!("{}", self.threshold_at_best)),
            ("n", self.n.to_string()),
            ("positives", self.positives.to_string()),
        ];
        let mut out = String::new();
        for (name, value) in rows {
            let _ = writeln!(out, "{name:<18} {value:>10}");
        }
        out
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction for unknown subject {0}")]
    MissingSubject(String),
    #[error("subject {0} has no label")]
    MissingLabel(String),
    #[error("subject {0} predicted more than once")]
    DuplicateSubject(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Joins predictions with dataset labels, sorted by subject id.
pub fn join_labels(
    predictions: &[Prediction],
    dataset: &[PatientRecord],
) -> Result<(Vec<f64>, Vec<u8>), EvalError> {
    let labels: HashMap<&str, Option<u8>> = dataset
        .iter()
        .map(|r| (r.subject_id.as_str(), r.label))
        .collect();
    let mut seen = HashSet::new();
    let mut joined = Vec::with_capacity(predictions.len());
    for p in predictions {
        if !seen.insert(p.subject_id.as_str()) {
            return Err(EvalError::DuplicateSubject(p.subject_id.clone()));
        }
        let label = labels
            .get(p.subject_id.as_str())
            .ok_or_else(|| EvalError::MissingSubject(p.subject_id.clone()))?
            .ok_or_else(|| EvalError::MissingLabel(p.subject_id.clone()))?;
        joined.push((p.subject_id.as_str(), p.risk_score, label));
    }
    joined.sort_by(|a, b| a.0.cmp(b.0));
    Ok(joined.into_iter().map(|(_, s, l)| (s, l)).unzip())
}

pub fn evaluate_run(
    predictions: &[Prediction],
    dataset: &[PatientRecord],
) -> Result<MetricReport, EvalError> {
    let (scores, labels) = join_labels(predictions, dataset)?;
    Ok(MetricReport::compute(&scores, &labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise AUROC numerator (wins twice, ties once) and denominator.
    fn brute_auroc(scores: &[f64], labels: &[u8]) -> (u128, u128) {
        let mut num = 0;
        let mut den = 0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 2;
                    num += if si > sj {
                        2
                    } else if si == sj {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        (num, den)
    }

    fn brute_best_f1(scores: &[f64], labels: &[u8]) -> (f64, f64) {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.push(f64::INFINITY);
        let mut best = (0.0, f64::INFINITY);
        for t in thresholds {
            let f = f1_at(scores, labels, t).unwrap();
            if f > best.0 || (f == best.0 && t > best.1) {
                best = (f, t);
            }
        }
        best
    }

    fn reduce((a, b): (u128, u128)) -> (u128, u128) {
        fn gcd(a: u128, b: u128) -> u128 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(a, b).max(1);
        (a / g, b / g)
    }

    #[test]
    fn fixtures() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3], &[1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[5.0; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!((auprc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(auprc(&[3.0, 2.0, 1.0], &[1, 1, 0]).unwrap(), 1.0);
        let best = best_f1_sweep(&[0.9, 0.8, 0.3], &[1, 0, 0]).unwrap();
        assert_eq!((best.f1, best.threshold), (1.0, 0.9));
        assert_eq!(auroc(&[1.0], &[1]), Err(MetricError::DegenerateCohort));
    }

    #[test]
    fn evaluate_run_joins_by_subject() {
        let rec = |id: &str, label| PatientRecord {
            subject_id: id.into(),
            demographics: Default::default(),
            index_date: "2020-01-01".into(),
            label,
            observations: vec![],
        };
        let pred = |id: &str, s| Prediction {
            subject_id: id.into(),
            risk_score: s,
            label: None,
            model: "m".into(),
            config_fingerprint: "f".into(),
        };
        let data = vec![rec("a", Some(1)), rec("b", Some(0)), rec("c", None)];
        let report = evaluate_run(&[pred("b", 2.0), pred("a", 8.0)], &data).unwrap();
        assert_eq!(report, MetricReport::compute(&[8.0, 2.0], &[1, 0]).unwrap());
        assert_eq!(
            evaluate_run(&[pred("c", 1.0)], &data),
            Err(EvalError::MissingLabel("c".into()))
        );
        assert_eq!(
            evaluate_run(&[pred("z", 1.0)], &data),
            Err(EvalError::MissingSubject("z".into()))
        );
        assert_eq!(
            evaluate_run(&[pred("a", 1.0), pred("a", 2.0)], &data),
            Err(EvalError::DuplicateSubject("a".into()))
        );
    }

    fn cohort() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(1u8..=10, n),
                    proptest::collection::vec(0u8..=1, n),
                )
            })
            .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
            .prop_map(|(s, l)| (s.into_iter().map(f64::from).collect(), l))
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count((scores, labels) in cohort()) {
            prop_assert_eq!(reduce(auroc_fraction(&scores, &labels).unwrap()), reduce(brute_auroc(&scores, &labels)));
        }

        #[test]
        fn auroc_inverts_with_labels((scores, labels) in cohort()) {
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((scores, labels) in cohort()) {
            let t: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&t, &labels).unwrap());
            prop_assert_eq!(best_f1_sweep(&scores, &labels).unwrap().f1, best_f1_sweep(&t, &labels).unwrap().f1);
        }

        #[test]
        fn sweep_matches_enumeration((scores, labels) in cohort(), probe in 0.0f64..11.0) {
            let best = best_f1_sweep(&scores, &labels).unwrap();
            prop_assert_eq!((best.f1, best.threshold), brute_best_f1(&scores, &labels));
            prop_assert!(best.f1 >= f1_at(&scores, &labels, probe).unwrap());
        }
    }
}
